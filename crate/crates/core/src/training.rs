//! Schedules, SGD with momentum, and the training loops for SymNets and the
//! single-head baselines.
//!
//! A SymNet step is two updates with separate forward passes. First the task
//! heads minimize their supervised and domain-discrimination losses with `G`
//! held fixed. Then `G` minimizes the confusion objective against the freshly
//! updated heads, which are held fixed in turn.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::{Dataset, PairSampler};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::losses::{graph, LabeledBatch, UnlabeledBatch};
use crate::model::{
    BaselineNet, ClassifierHead, DomainDiscriminator, Head, ModelConfig, Network, Parameters, SymNet,
};
use crate::numerics::Matrix;
use crate::seed;

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub momentum: f64,
    /// Rows per domain in each paired batch.
    pub batch_size: usize,
    /// Applied to every task-head and discriminator parameter.
    pub classifier_lr_multiplier: f64,
    pub total_epochs: usize,
    /// Record a report row every this many epochs. The last epoch is always recorded.
    pub eval_every: usize,
    /// Overrides the λ schedule with a constant.
    pub lambda_fixed: Option<f64>,
    /// Also apply the head-group loss gradient to `G`, at the base rate.
    pub classifier_loss_updates_features: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            eta0: 0.01,
            alpha: 10.0,
            beta: 0.75,
            gamma: 10.0,
            momentum: 0.9,
            batch_size: 64,
            classifier_lr_multiplier: 10.0,
            total_epochs: 200,
            eval_every: 10,
            lambda_fixed: None,
            classifier_loss_updates_features: false,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.eta0 > 0.0 && self.eta0.is_finite(), "eta0 must be positive"),
            (
                self.alpha >= 0.0 && self.alpha.is_finite(),
                "alpha must be nonnegative",
            ),
            (
                self.beta >= 0.0 && self.beta.is_finite(),
                "beta must be nonnegative",
            ),
            (
                self.gamma > 0.0 && self.gamma.is_finite(),
                "gamma must be positive",
            ),
            ((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)"),
            (self.batch_size > 0, "batch_size must be positive"),
            (
                self.classifier_lr_multiplier > 0.0 && self.classifier_lr_multiplier.is_finite(),
                "classifier_lr_multiplier must be positive",
            ),
            (self.eval_every > 0, "eval_every must be positive"),
            (
                self.lambda_fixed.is_none_or(f64::is_finite),
                "lambda_fixed must be finite",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::invalid(*msg)),
            None => Ok(()),
        }
    }
}

fn check_progress(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("training progress {p} is outside [0, 1]")));
    }
    Ok(())
}

/// `η_p = η₀ / (1 + αp)^β`.
pub fn lr_at(p: f64, cfg: &ScheduleConfig) -> Result<f64> {
    check_progress(p)?;
    Ok(cfg.eta0 / (1.0 + cfg.alpha * p).powf(cfg.beta))
}

/// `λ_p = 2 / (1 + e^{−γp}) − 1`.
pub fn lambda_at(p: f64, cfg: &ScheduleConfig) -> Result<f64> {
    check_progress(p)?;
    Ok(2.0 / (1.0 + (-cfg.gamma * p).exp()) - 1.0)
}

/// Progress of epoch `epoch` (0-based) in a run of `total` epochs, constant
/// within the epoch and reaching 1 on the last one.
pub fn progress(epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        0.0
    } else {
        epoch as f64 / (total - 1) as f64
    }
}

/// Momentum buffers for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(params: &[&Matrix]) -> Self {
        OptimizerState {
            velocity: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn for_group(group: &impl Parameters) -> Self {
        Self::new(&group.params())
    }
}

/// `v ← momentum·v + g; w ← w − lr·v`, for each parameter in order.
pub fn sgd_step(
    params: Vec<&mut Matrix>,
    grads: &[Matrix],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} parameters, {} gradients, {} velocities",
                params.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for ((w, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "parameter {:?}, gradient {:?}, velocity {:?}",
                    w.shape(),
                    g.shape(),
                    v.shape()
                ),
            ));
        }
    }
    for ((w, g), v) in params.into_iter().zip(grads).zip(&mut state.velocity) {
        for ((wi, gi), vi) in w
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(v.as_mut_slice())
        {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Training recipe. The names match the ones accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "source_only")]
    SourceOnly,
    #[serde(rename = "source_only_em")]
    SourceOnlyEm,
    #[serde(rename = "domain_confusion")]
    DomainConfusion,
    #[serde(rename = "domain_confusion_em")]
    DomainConfusionEm,
    #[serde(rename = "symnet")]
    SymNet,
    /// `Ct` gets no supervised loss; predictions come from `Cs`.
    #[serde(rename = "symnet_wo_Etask_t")]
    SymNetWoEtaskT,
    /// No entropy term.
    #[serde(rename = "symnet_wo_M")]
    SymNetWoM,
    /// `G` minimizes the averaged two-head cross-entropy; no domain confusion.
    #[serde(rename = "symnet_wo_confusion")]
    SymNetWoConfusion,
    /// Category confusion replaced by domain confusion on source rows.
    #[serde(rename = "symnet_wo_category_confusion")]
    SymNetWoCategoryConfusion,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::SourceOnly,
        Method::SourceOnlyEm,
        Method::DomainConfusion,
        Method::DomainConfusionEm,
        Method::SymNet,
        Method::SymNetWoEtaskT,
        Method::SymNetWoM,
        Method::SymNetWoConfusion,
        Method::SymNetWoCategoryConfusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::SourceOnlyEm => "source_only_em",
            Method::DomainConfusion => "domain_confusion",
            Method::DomainConfusionEm => "domain_confusion_em",
            Method::SymNet => "symnet",
            Method::SymNetWoEtaskT => "symnet_wo_Etask_t",
            Method::SymNetWoM => "symnet_wo_M",
            Method::SymNetWoConfusion => "symnet_wo_confusion",
            Method::SymNetWoCategoryConfusion => "symnet_wo_category_confusion",
        }
    }

    pub fn is_symnet(self) -> bool {
        matches!(
            self,
            Method::SymNet
                | Method::SymNetWoEtaskT
                | Method::SymNetWoM
                | Method::SymNetWoConfusion
                | Method::SymNetWoCategoryConfusion
        )
    }

    /// The head whose target accuracy is reported.
    pub fn eval_head(self) -> Head {
        match self {
            Method::SymNetWoEtaskT => Head::Cs,
            m if m.is_symnet() => Head::Ct,
            _ => Head::C,
        }
    }

    fn has_entropy(self) -> bool {
        !matches!(
            self,
            Method::SourceOnly | Method::DomainConfusion | Method::SymNetWoM
        )
    }

    fn has_target_task(self) -> bool {
        self.is_symnet() && self != Method::SymNetWoEtaskT
    }

    /// Report columns present for this method, in file order.
    pub fn report_columns(self) -> Vec<Column> {
        use Column::*;
        let mut cols = vec![Epoch, P, Lambda, Lr, LossTaskS];
        if self.has_target_task() {
            cols.push(LossTaskT);
        }
        if self.is_symnet() || matches!(self, Method::DomainConfusion | Method::DomainConfusionEm) {
            cols.push(LossDomainDisc);
        }
        if self.is_symnet() {
            cols.push(LossCatConf);
        }
        if matches!(self, Method::DomainConfusion | Method::DomainConfusionEm)
            || (self.is_symnet() && self != Method::SymNetWoConfusion)
        {
            cols.push(LossDomConf);
        }
        if self.has_entropy() {
            cols.push(LossEntropy);
        }
        cols.extend([AccCsSrc, AccCsTgt]);
        if self.has_target_task() {
            cols.extend([AccCtSrc, AccCtTgt]);
        }
        cols
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// One loss term tracked during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    /// Cross-entropy of `Cs` (or the baseline head) on source rows.
    TaskS,
    /// Cross-entropy of `Ct` on source rows.
    TaskT,
    /// SymNet domain discrimination, or the baseline discriminator loss.
    DomainDisc,
    /// Category confusion, or the loss an ablation puts in its place.
    CatConf,
    /// Domain confusion on target rows, or the baseline confusion loss.
    DomConf,
    Entropy,
}

const TERMS: [Term; 6] = [
    Term::TaskS,
    Term::TaskT,
    Term::DomainDisc,
    Term::CatConf,
    Term::DomConf,
    Term::Entropy,
];

/// Loss terms of one update, by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepLosses {
    values: [Option<f64>; 6],
}

impl StepLosses {
    fn slot(term: Term) -> usize {
        TERMS.iter().position(|&t| t == term).unwrap_or_default()
    }

    pub fn get(&self, term: Term) -> Option<f64> {
        self.values[Self::slot(term)]
    }

    fn set(&mut self, term: Term, value: f64) {
        self.values[Self::slot(term)] = Some(value);
    }

    fn merge(&mut self, other: &StepLosses) {
        for (a, b) in self.values.iter_mut().zip(other.values) {
            if b.is_some() {
                *a = b;
            }
        }
    }
}

/// A recorded loss graph with the parameter leaves of every group.
///
/// Groups not taking part in the objective are still bound, so tests can
/// confirm that they receive no gradient.
#[derive(Debug)]
pub struct LossGraph {
    pub tape: Tape,
    pub g: Vec<Var>,
    pub heads: Vec<Vec<Var>>,
    pub loss: Var,
    pub terms: Vec<(Term, Var)>,
}

impl LossGraph {
    pub fn term(&self, term: Term) -> Option<Var> {
        self.terms.iter().find(|(t, _)| *t == term).map(|&(_, v)| v)
    }

    fn losses(&self) -> StepLosses {
        let mut out = StepLosses::default();
        for &(t, v) in &self.terms {
            out.set(t, self.tape.scalar(v));
        }
        out
    }

    fn grads_of(&self, grads: &Gradients, vars: &[Var]) -> Vec<Matrix> {
        vars.iter().map(|&v| grads.get_or_zero(&self.tape, v)).collect()
    }
}

fn bind_symnet(model: &SymNet, tape: &mut Tape) -> (Vec<Var>, Vec<Var>, Vec<Var>) {
    (model.g.bind(tape), model.cs.bind(tape), model.ct.bind(tape))
}

/// Objective of the head group: source task loss, cross-domain task loss for
/// `Ct`, and domain discrimination.
///
/// With `through_features` false, features enter as constants and `G`
/// receives no gradient.
pub fn symnet_classifier_graph(
    model: &SymNet,
    method: Method,
    src: &LabeledBatch,
    tgt: &UnlabeledBatch,
    through_features: bool,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let (g, cs, ct) = bind_symnet(model, &mut tape);
    let (fs, ft) = if through_features {
        let xs = tape.leaf(src.inputs.clone());
        let xt = tape.leaf(tgt.inputs.clone());
        (
            model.g.record(&mut tape, &g, xs)?,
            model.g.record(&mut tape, &g, xt)?,
        )
    } else {
        let fs = model.g.forward(&src.inputs)?;
        let ft = model.g.forward(&tgt.inputs)?;
        (tape.leaf(fs), tape.leaf(ft))
    };
    let vs_s = ClassifierHead::record(&mut tape, &cs, fs)?;
    let vt_s = ClassifierHead::record(&mut tape, &ct, fs)?;
    let vs_t = ClassifierHead::record(&mut tape, &cs, ft)?;
    let vt_t = ClassifierHead::record(&mut tape, &ct, ft)?;

    let mut terms = vec![(Term::TaskS, graph::task_source(&mut tape, vs_s, &src.labels)?)];
    if method.has_target_task() {
        let t = graph::task_target_crossdomain(&mut tape, vt_s, &src.labels)?;
        terms.push((Term::TaskT, t));
    }
    let disc = graph::domain_discrimination(&mut tape, (vs_s, vt_s), (vs_t, vt_t))?;
    terms.push((Term::DomainDisc, disc));
    let loss = sum_terms(&mut tape, &terms)?;
    Ok(LossGraph {
        tape,
        g,
        heads: vec![cs, ct],
        loss,
        terms,
    })
}

/// Objective of `G`: category confusion plus λ times domain confusion on
/// target rows and entropy of the merged category distribution.
///
/// The entropy term reads the heads through detached copies, so it reaches
/// `G` only.
pub fn symnet_feature_graph(
    model: &SymNet,
    method: Method,
    src: &LabeledBatch,
    tgt: &UnlabeledBatch,
    lambda: f64,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let (g, cs, ct) = bind_symnet(model, &mut tape);
    let xs = tape.leaf(src.inputs.clone());
    let xt = tape.leaf(tgt.inputs.clone());
    let fs = model.g.record(&mut tape, &g, xs)?;
    let ft = model.g.record(&mut tape, &g, xt)?;
    let vs_s = ClassifierHead::record(&mut tape, &cs, fs)?;
    let vt_s = ClassifierHead::record(&mut tape, &ct, fs)?;

    let mut terms = Vec::new();
    let main = match method {
        Method::SymNetWoConfusion => {
            graph::two_head_supervised_degenerate(&mut tape, vs_s, vt_s, &src.labels)?
        }
        Method::SymNetWoCategoryConfusion => {
            graph::domain_confusion_source_degenerate(&mut tape, vs_s, vt_s)?
        }
        _ => graph::category_confusion(&mut tape, vs_s, vt_s, &src.labels)?,
    };
    terms.push((Term::CatConf, main));
    let mut loss = main;

    let mut weighted = Vec::new();
    if method != Method::SymNetWoConfusion {
        let vs_t = ClassifierHead::record(&mut tape, &cs, ft)?;
        let vt_t = ClassifierHead::record(&mut tape, &ct, ft)?;
        let dom = graph::domain_confusion_target(&mut tape, vs_t, vt_t)?;
        terms.push((Term::DomConf, dom));
        weighted.push(dom);
    }
    if method.has_entropy() {
        let cs_d: Vec<Var> = cs.iter().map(|&v| tape.detach(v)).collect();
        let ct_d: Vec<Var> = ct.iter().map(|&v| tape.detach(v)).collect();
        let vs_t = ClassifierHead::record(&mut tape, &cs_d, ft)?;
        let vt_t = ClassifierHead::record(&mut tape, &ct_d, ft)?;
        let ent = graph::entropy_min(&mut tape, vs_t, vt_t)?;
        terms.push((Term::Entropy, ent));
        weighted.push(ent);
    }
    for v in weighted {
        let scaled = tape.scale(v, lambda);
        loss = tape.add(loss, scaled)?;
    }
    Ok(LossGraph {
        tape,
        g,
        heads: vec![cs, ct],
        loss,
        terms,
    })
}

fn sum_terms(tape: &mut Tape, terms: &[(Term, Var)]) -> Result<Var> {
    let mut total = terms[0].1;
    for &(_, v) in &terms[1..] {
        total = tape.add(total, v)?;
    }
    Ok(total)
}

/// Momentum buffers for every SymNet group.
#[derive(Debug, Clone, PartialEq)]
pub struct SymNetOptimizer {
    pub g: OptimizerState,
    pub cs: OptimizerState,
    pub ct: OptimizerState,
}

impl SymNetOptimizer {
    pub fn new(model: &SymNet) -> Self {
        SymNetOptimizer {
            g: OptimizerState::for_group(&model.g),
            cs: OptimizerState::for_group(&model.cs),
            ct: OptimizerState::for_group(&model.ct),
        }
    }
}

/// Learning rate and λ for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub lr: f64,
    pub lambda: f64,
}

impl StepSchedule {
    /// Schedule values at progress `p`, honoring `lambda_fixed`.
    pub fn at(p: f64, cfg: &ScheduleConfig) -> Result<Self> {
        Ok(StepSchedule {
            lr: lr_at(p, cfg)?,
            lambda: match cfg.lambda_fixed {
                Some(l) => l,
                None => lambda_at(p, cfg)?,
            },
        })
    }
}

/// Head-group update followed by the `G` update.
pub fn symnet_step(
    model: &mut SymNet,
    opt: &mut SymNetOptimizer,
    method: Method,
    src: &LabeledBatch,
    tgt: &UnlabeledBatch,
    sched: StepSchedule,
    cfg: &ScheduleConfig,
) -> Result<StepLosses> {
    let mut losses = symnet_classifier_update(model, opt, method, src, tgt, sched, cfg)?;
    losses.merge(&symnet_feature_update(model, opt, method, src, tgt, sched, cfg)?);
    Ok(losses)
}

fn require_symnet(method: Method) -> Result<()> {
    if !method.is_symnet() {
        return Err(Error::invalid(format!("{method} is not a SymNet method")));
    }
    Ok(())
}

/// Moves `Cs` and `Ct` at `lr · classifier_lr_multiplier`. `G` moves only
/// when `classifier_loss_updates_features` is set.
pub fn symnet_classifier_update(
    model: &mut SymNet,
    opt: &mut SymNetOptimizer,
    method: Method,
    src: &LabeledBatch,
    tgt: &UnlabeledBatch,
    sched: StepSchedule,
    cfg: &ScheduleConfig,
) -> Result<StepLosses> {
    require_symnet(method)?;
    let head_lr = sched.lr * cfg.classifier_lr_multiplier;
    let cg = symnet_classifier_graph(model, method, src, tgt, cfg.classifier_loss_updates_features)?;
    let grads = cg.tape.backward(cg.loss)?;
    sgd_step(
        model.cs.params_mut(),
        &cg.grads_of(&grads, &cg.heads[0]),
        &mut opt.cs,
        head_lr,
        cfg.momentum,
    )?;
    sgd_step(
        model.ct.params_mut(),
        &cg.grads_of(&grads, &cg.heads[1]),
        &mut opt.ct,
        head_lr,
        cfg.momentum,
    )?;
    if cfg.classifier_loss_updates_features {
        sgd_step(
            model.g.params_mut(),
            &cg.grads_of(&grads, &cg.g),
            &mut opt.g,
            sched.lr,
            cfg.momentum,
        )?;
    }
    Ok(cg.losses())
}

/// Moves `G` at `lr` against the current heads.
pub fn symnet_feature_update(
    model: &mut SymNet,
    opt: &mut SymNetOptimizer,
    method: Method,
    src: &LabeledBatch,
    tgt: &UnlabeledBatch,
    sched: StepSchedule,
    cfg: &ScheduleConfig,
) -> Result<StepLosses> {
    require_symnet(method)?;
    let fg = symnet_feature_graph(model, method, src, tgt, sched.lambda)?;
    let grads = fg.tape.backward(fg.loss)?;
    sgd_step(
        model.g.params_mut(),
        &fg.grads_of(&grads, &fg.g),
        &mut opt.g,
        sched.lr,
        cfg.momentum,
    )?;
    Ok(fg.losses())
}

/// Discriminator objective on features computed with `G` fixed.
pub fn baseline_discriminator_graph(
    model: &BaselineNet,
    src: &LabeledBatch,
    tgt: &UnlabeledBatch,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let g = model.g.bind(&mut tape);
    let head = model.head.bind(&mut tape);
    let d = model.disc.bind(&mut tape);
    let fs = tape.leaf(model.g.forward(&src.inputs)?);
    let ft = tape.leaf(model.g.forward(&tgt.inputs)?);
    let zs = DomainDiscriminator::record(&mut tape, &d, fs)?;
    let zt = DomainDiscriminator::record(&mut tape, &d, ft)?;
    let loss = graph::dc_discriminator(&mut tape, zs, zt)?;
    Ok(LossGraph {
        tape,
        g,
        heads: vec![head, d],
        loss,
        terms: vec![(Term::DomainDisc, loss)],
    })
}

/// Objective of `G` and the task head: source cross-entropy, plus λ times
/// the confusion loss and, for the `*_em` methods, λ times the target entropy
/// seen through a detached head.
pub fn baseline_main_graph(
    model: &BaselineNet,
    method: Method,
    src: &LabeledBatch,
    tgt: &UnlabeledBatch,
    lambda: f64,
) -> Result<LossGraph> {
    if method.is_symnet() {
        return Err(Error::invalid(format!("{method} is not a baseline method")));
    }
    let mut tape = Tape::new();
    let g = model.g.bind(&mut tape);
    let head = model.head.bind(&mut tape);
    let d = model.disc.bind(&mut tape);
    let xs = tape.leaf(src.inputs.clone());
    let fs = model.g.record(&mut tape, &g, xs)?;
    let v = ClassifierHead::record(&mut tape, &head, fs)?;
    let task = graph::cross_entropy(&mut tape, v, &src.labels)?;
    let mut terms = vec![(Term::TaskS, task)];
    let mut loss = task;

    let adversarial = matches!(method, Method::DomainConfusion | Method::DomainConfusionEm);
    if adversarial || method.has_entropy() {
        let xt = tape.leaf(tgt.inputs.clone());
        let ft = model.g.record(&mut tape, &g, xt)?;
        let mut weighted = Vec::new();
        if adversarial {
            let zs = DomainDiscriminator::record(&mut tape, &d, fs)?;
            let zt = DomainDiscriminator::record(&mut tape, &d, ft)?;
            let conf = graph::dc_confusion(&mut tape, zs, zt)?;
            terms.push((Term::DomConf, conf));
            weighted.push(conf);
        }
        if method.has_entropy() {
            let detached: Vec<Var> = head.iter().map(|&p| tape.detach(p)).collect();
            let vt = ClassifierHead::record(&mut tape, &detached, ft)?;
            let ent = graph::entropy_single(&mut tape, vt)?;
            terms.push((Term::Entropy, ent));
            weighted.push(ent);
        }
        for w in weighted {
            let scaled = tape.scale(w, lambda);
            loss = tape.add(loss, scaled)?;
        }
    }
    Ok(LossGraph {
        tape,
        g,
        heads: vec![head, d],
        loss,
        terms,
    })
}

/// Momentum buffers for every baseline group.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOptimizer {
    pub g: OptimizerState,
    pub head: OptimizerState,
    pub disc: OptimizerState,
}

impl BaselineOptimizer {
    pub fn new(model: &BaselineNet) -> Self {
        BaselineOptimizer {
            g: OptimizerState::for_group(&model.g),
            head: OptimizerState::for_group(&model.head),
            disc: OptimizerState::for_group(&model.disc),
        }
    }
}

/// Discriminator update (adversarial methods only), then the joint `G` and
/// head update.
pub fn baseline_step(
    model: &mut BaselineNet,
    opt: &mut BaselineOptimizer,
    method: Method,
    src: &LabeledBatch,
    tgt: &UnlabeledBatch,
    sched: StepSchedule,
    cfg: &ScheduleConfig,
) -> Result<StepLosses> {
    let head_lr = sched.lr * cfg.classifier_lr_multiplier;
    let mut losses = StepLosses::default();
    if matches!(method, Method::DomainConfusion | Method::DomainConfusionEm) {
        let dg = baseline_discriminator_graph(model, src, tgt)?;
        let grads = dg.tape.backward(dg.loss)?;
        losses.merge(&dg.losses());
        sgd_step(
            model.disc.params_mut(),
            &dg.grads_of(&grads, &dg.heads[1]),
            &mut opt.disc,
            head_lr,
            cfg.momentum,
        )?;
    }
    let mg = baseline_main_graph(model, method, src, tgt, sched.lambda)?;
    let grads = mg.tape.backward(mg.loss)?;
    losses.merge(&mg.losses());
    sgd_step(
        model.g.params_mut(),
        &mg.grads_of(&grads, &mg.g),
        &mut opt.g,
        sched.lr,
        cfg.momentum,
    )?;
    sgd_step(
        model.head.params_mut(),
        &mg.grads_of(&grads, &mg.heads[0]),
        &mut opt.head,
        head_lr,
        cfg.momentum,
    )?;
    Ok(losses)
}

/// A column of the training report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Column {
    Epoch,
    P,
    Lambda,
    Lr,
    LossTaskS,
    LossTaskT,
    LossDomainDisc,
    LossCatConf,
    LossDomConf,
    LossEntropy,
    AccCsSrc,
    AccCsTgt,
    AccCtSrc,
    AccCtTgt,
}

impl Column {
    pub fn name(self) -> &'static str {
        match self {
            Column::Epoch => "epoch",
            Column::P => "p",
            Column::Lambda => "lambda",
            Column::Lr => "lr",
            Column::LossTaskS => "loss_task_s",
            Column::LossTaskT => "loss_task_t",
            Column::LossDomainDisc => "loss_domain_disc",
            Column::LossCatConf => "loss_cat_conf",
            Column::LossDomConf => "loss_dom_conf",
            Column::LossEntropy => "loss_entropy",
            Column::AccCsSrc => "acc_cs_src",
            Column::AccCsTgt => "acc_cs_tgt",
            Column::AccCtSrc => "acc_ct_src",
            Column::AccCtTgt => "acc_ct_tgt",
        }
    }
}

/// Metrics after one recorded epoch. Losses are means over the epoch's steps.
/// For baselines the `cs` accuracies belong to the single head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Completed epochs.
    pub epoch: usize,
    pub p: f64,
    pub lambda: f64,
    pub lr: f64,
    pub loss_task_s: Option<f64>,
    pub loss_task_t: Option<f64>,
    pub loss_domain_disc: Option<f64>,
    pub loss_cat_conf: Option<f64>,
    pub loss_dom_conf: Option<f64>,
    pub loss_entropy: Option<f64>,
    pub acc_cs_src: f64,
    pub acc_cs_tgt: f64,
    pub acc_ct_src: Option<f64>,
    pub acc_ct_tgt: Option<f64>,
}

impl TrainRecord {
    pub fn value(&self, column: Column) -> Option<f64> {
        match column {
            Column::Epoch => Some(self.epoch as f64),
            Column::P => Some(self.p),
            Column::Lambda => Some(self.lambda),
            Column::Lr => Some(self.lr),
            Column::LossTaskS => self.loss_task_s,
            Column::LossTaskT => self.loss_task_t,
            Column::LossDomainDisc => self.loss_domain_disc,
            Column::LossCatConf => self.loss_cat_conf,
            Column::LossDomConf => self.loss_dom_conf,
            Column::LossEntropy => self.loss_entropy,
            Column::AccCsSrc => Some(self.acc_cs_src),
            Column::AccCsTgt => Some(self.acc_cs_tgt),
            Column::AccCtSrc => self.acc_ct_src,
            Column::AccCtTgt => self.acc_ct_tgt,
        }
    }

    /// Target accuracy of the head the method reports.
    pub fn reported_tgt_acc(&self, method: Method) -> f64 {
        match method.eval_head() {
            Head::Ct => self.acc_ct_tgt.unwrap_or(self.acc_cs_tgt),
            Head::Cs | Head::C => self.acc_cs_tgt,
        }
    }
}

/// Per-checkpoint metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn columns(&self) -> Vec<Column> {
        self.method.report_columns()
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let header: Vec<&str> = cols.iter().map(|c| c.name()).collect();
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.records {
            for (i, &c) in cols.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                match c {
                    Column::Epoch => write!(out, "{}", r.epoch),
                    _ => write!(out, "{}", r.value(c).unwrap_or(f64::NAN)),
                }
                .expect("writing to a String cannot fail");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Training and evaluation splits. Target labels are used only for
/// evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub src_train: &'a Dataset,
    pub tgt_train: &'a Dataset,
    pub src_eval: &'a Dataset,
    pub tgt_eval: &'a Dataset,
}

impl TrainData<'_> {
    fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (name, ds) in [
            ("source training", self.src_train),
            ("target training", self.tgt_train),
            ("source evaluation", self.src_eval),
            ("target evaluation", self.tgt_eval),
        ] {
            if ds.num_categories() != config.num_categories {
                return Err(Error::invalid(format!(
                    "{name} data has {} categories, the model has {}",
                    ds.num_categories(),
                    config.num_categories
                )));
            }
            if ds.input_dim() != config.input_dim {
                return Err(Error::invalid(format!(
                    "{name} data has {} features, the model expects {}",
                    ds.input_dim(),
                    config.input_dim
                )));
            }
        }
        Ok(())
    }
}

/// A finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub network: Network,
}

#[derive(Default)]
struct EpochMeans {
    sums: [f64; 6],
    counts: [usize; 6],
}

impl EpochMeans {
    fn add(&mut self, losses: &StepLosses) {
        for (i, v) in losses.values.iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += v;
                self.counts[i] += 1;
            }
        }
    }

    fn mean(&self, term: Term) -> Option<f64> {
        let i = StepLosses::slot(term);
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }
}

fn record_epoch(
    epoch: usize,
    p: f64,
    sched: StepSchedule,
    means: &EpochMeans,
    network: &Network,
    method: Method,
    data: &TrainData,
) -> Result<TrainRecord> {
    let (first, second) = match network {
        Network::SymNet(_) => (Head::Cs, method.has_target_task().then_some(Head::Ct)),
        Network::Baseline(_) => (Head::C, None),
    };
    let acc_pair = |head| -> Result<(f64, f64)> {
        Ok((
            accuracy(network, data.src_eval, head)?,
            accuracy(network, data.tgt_eval, head)?,
        ))
    };
    let (acc_cs_src, acc_cs_tgt) = acc_pair(first)?;
    let ct = second.map(acc_pair).transpose()?;
    let cols = method.report_columns();
    let present = |c: Column, t: Term| if cols.contains(&c) { means.mean(t) } else { None };
    Ok(TrainRecord {
        epoch,
        p,
        lambda: sched.lambda,
        lr: sched.lr,
        loss_task_s: present(Column::LossTaskS, Term::TaskS),
        loss_task_t: present(Column::LossTaskT, Term::TaskT),
        loss_domain_disc: present(Column::LossDomainDisc, Term::DomainDisc),
        loss_cat_conf: present(Column::LossCatConf, Term::CatConf),
        loss_dom_conf: present(Column::LossDomConf, Term::DomConf),
        loss_entropy: present(Column::LossEntropy, Term::Entropy),
        acc_cs_src,
        acc_cs_tgt,
        acc_ct_src: ct.map(|c| c.0),
        acc_ct_tgt: ct.map(|c| c.1),
    })
}

/// Trains `method` from the seed's initialization.
pub fn train(
    method: Method,
    config: &ModelConfig,
    cfg: &ScheduleConfig,
    data: &TrainData,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    cfg.validate()?;
    data.validate(config)?;
    let network = if method.is_symnet() {
        Network::SymNet(SymNet::init(config, seed)?)
    } else {
        Network::Baseline(BaselineNet::init(config, seed)?)
    };
    train_from(method, network, cfg, data, seed)
}

/// Trains a SymNet variant starting from `model`.
pub fn train_symnet(
    method: Method,
    model: SymNet,
    cfg: &ScheduleConfig,
    data: &TrainData,
    seed: u64,
) -> Result<TrainOutcome> {
    require_symnet(method)?;
    train_from(method, Network::SymNet(model), cfg, data, seed)
}

/// Trains a baseline starting from `model`.
pub fn train_baseline(
    method: Method,
    model: BaselineNet,
    cfg: &ScheduleConfig,
    data: &TrainData,
    seed: u64,
) -> Result<TrainOutcome> {
    if method.is_symnet() {
        return Err(Error::invalid(format!("{method} is not a baseline method")));
    }
    train_from(method, Network::Baseline(model), cfg, data, seed)
}

enum Optimizer {
    SymNet(SymNetOptimizer),
    Baseline(BaselineOptimizer),
}

fn train_from(
    method: Method,
    mut network: Network,
    cfg: &ScheduleConfig,
    data: &TrainData,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate(&network.config())?;
    let mut opt = match &network {
        Network::SymNet(m) => Optimizer::SymNet(SymNetOptimizer::new(m)),
        Network::Baseline(m) => Optimizer::Baseline(BaselineOptimizer::new(m)),
    };
    let mut sampler = PairSampler::new(
        data.src_train,
        data.tgt_train,
        cfg.batch_size,
        seed::stream(seed, "batches"),
    )?;
    let steps = sampler.steps_per_epoch();
    let mut records = Vec::new();
    for epoch in 0..cfg.total_epochs {
        let p = progress(epoch, cfg.total_epochs);
        let sched = StepSchedule::at(p, cfg)?;
        let mut means = EpochMeans::default();
        for _ in 0..steps {
            let (src, tgt) = sampler.next_pair();
            let losses = match (&mut network, &mut opt) {
                (Network::SymNet(m), Optimizer::SymNet(o)) => {
                    symnet_step(m, o, method, &src, &tgt, sched, cfg)?
                }
                (Network::Baseline(m), Optimizer::Baseline(o)) => {
                    baseline_step(m, o, method, &src, &tgt, sched, cfg)?
                }
                _ => unreachable!("optimizer is built from the network"),
            };
            means.add(&losses);
        }
        let done = epoch + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_epochs {
            records.push(record_epoch(done, p, sched, &means, &network, method, data)?);
        }
    }
    Ok(TrainOutcome {
        report: TrainReport {
            method,
            seed,
            records,
        },
        network,
    })
}
