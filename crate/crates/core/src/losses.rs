//! Training objectives, each a batch-mean scalar recorded on a [`Tape`].
//!
//! Every probability that ends up inside a logarithm is obtained in log space:
//! category log-probabilities through a row-wise log-softmax, and the mass of a
//! half of the 2K-way output as `LSE(half logits) − LSE(all 2K logits)`.
//!
//! The functions in [`graph`] take logit nodes and record a loss; the free
//! functions at module level evaluate the same losses for a [`SymNet`] or a
//! [`BaselineNet`] and return plain numbers.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BaselineNet, Parameters, SymNet};
use crate::numerics::Matrix;

/// Labeled source samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::shape(
                "LabeledBatch",
                format!("{} labels for {} rows", labels.len(), inputs.rows()),
            ));
        }
        if inputs.rows() == 0 {
            return Err(Error::invalid("empty labeled batch"));
        }
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Target samples; labels are never part of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBatch {
    pub inputs: Matrix,
}

impl UnlabeledBatch {
    pub fn new(inputs: Matrix) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::invalid("empty unlabeled batch"));
        }
        Ok(UnlabeledBatch { inputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Loss builders over logit nodes.
pub mod graph {
    use super::*;

    fn check_pair(tape: &Tape, v_s: Var, v_t: Var, op: &'static str) -> Result<()> {
        let (a, b) = (tape.value(v_s).shape(), tape.value(v_t).shape());
        if a != b {
            return Err(Error::shape(
                op,
                format!("source logits {a:?}, target logits {b:?}"),
            ));
        }
        Ok(())
    }

    /// Mean over rows of `values[i, labels[i] + offset]`, with labels in `0..categories`.
    fn mean_picked(
        tape: &mut Tape,
        values: Var,
        labels: &[usize],
        offset: usize,
        categories: usize,
        op: &'static str,
    ) -> Result<Var> {
        let (rows, cols) = tape.value(values).shape();
        if labels.len() != rows {
            return Err(Error::shape(
                op,
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        debug_assert!(offset + categories <= cols);
        let mut mask = Matrix::zeros(rows, cols);
        for (i, &y) in labels.iter().enumerate() {
            if y >= categories {
                return Err(Error::invalid(format!(
                    "{op}: label {y} out of range for {categories} categories"
                )));
            }
            mask.set(i, y + offset, 1.0);
        }
        let mask = tape.leaf(mask);
        let picked = tape.mul(values, mask)?;
        let per_row = tape.sum_rows(picked);
        Ok(tape.mean(per_row))
    }

    /// `(ln Σ_k p^st_k, ln Σ_k p^st_{k+K})` per row, as two B×1 columns.
    pub fn log_half_masses(tape: &mut Tape, v_s: Var, v_t: Var) -> Result<(Var, Var)> {
        check_pair(tape, v_s, v_t, "log_half_masses")?;
        let joined = tape.concat_cols(v_s, v_t)?;
        let lse_all = tape.log_sum_exp_rows(joined);
        let lse_s = tape.log_sum_exp_rows(v_s);
        let lse_t = tape.log_sum_exp_rows(v_t);
        Ok((tape.sub(lse_s, lse_all)?, tape.sub(lse_t, lse_all)?))
    }

    /// `−mean ln softmax(logits)[y]`.
    pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        let k = tape.value(logits).cols();
        let log_p = tape.log_softmax_rows(logits);
        let m = mean_picked(tape, log_p, labels, 0, k, "cross_entropy")?;
        Ok(tape.scale(m, -1.0))
    }

    /// Source head on source samples.
    pub fn task_source(tape: &mut Tape, v_s: Var, labels: &[usize]) -> Result<Var> {
        cross_entropy(tape, v_s, labels)
    }

    /// Target head supervised with source samples.
    pub fn task_target_crossdomain(tape: &mut Tape, v_t: Var, labels: &[usize]) -> Result<Var> {
        cross_entropy(tape, v_t, labels)
    }

    /// Two-way domain discrimination through the 2K-way classifier: target
    /// samples should put their mass on the target half, source samples on the
    /// source half.
    pub fn domain_discrimination(
        tape: &mut Tape,
        src_logits: (Var, Var),
        tgt_logits: (Var, Var),
    ) -> Result<Var> {
        let (src_half_s, _) = log_half_masses(tape, src_logits.0, src_logits.1)?;
        let (_, tgt_half_t) = log_half_masses(tape, tgt_logits.0, tgt_logits.1)?;
        let a = tape.mean(tgt_half_t);
        let b = tape.mean(src_half_s);
        let total = tape.add(a, b)?;
        Ok(tape.scale(total, -1.0))
    }

    /// Category-level confusion on labeled source samples: the pair of
    /// neurons `(y, y+K)` is pushed toward an even split.
    pub fn category_confusion(tape: &mut Tape, v_s: Var, v_t: Var, labels: &[usize]) -> Result<Var> {
        check_pair(tape, v_s, v_t, "category_confusion")?;
        let k = tape.value(v_s).cols();
        let joined = tape.concat_cols(v_s, v_t)?;
        let log_p = tape.log_softmax_rows(joined);
        let upper = mean_picked(tape, log_p, labels, k, k, "category_confusion")?;
        let lower = mean_picked(tape, log_p, labels, 0, k, "category_confusion")?;
        let total = tape.add(upper, lower)?;
        Ok(tape.scale(total, -0.5))
    }

    /// `−½ mean ln(target half) − ½ mean ln(source half)` on the given rows.
    fn half_mass_confusion(tape: &mut Tape, v_s: Var, v_t: Var) -> Result<Var> {
        let (half_s, half_t) = log_half_masses(tape, v_s, v_t)?;
        let a = tape.mean(half_t);
        let b = tape.mean(half_s);
        let total = tape.add(a, b)?;
        Ok(tape.scale(total, -0.5))
    }

    /// Domain-level confusion on unlabeled target samples.
    pub fn domain_confusion_target(tape: &mut Tape, v_s: Var, v_t: Var) -> Result<Var> {
        half_mass_confusion(tape, v_s, v_t)
    }

    /// Domain-level confusion on source samples, the replacement for
    /// [`category_confusion`] in the "without category confusion" ablation.
    pub fn domain_confusion_source_degenerate(tape: &mut Tape, v_s: Var, v_t: Var) -> Result<Var> {
        half_mass_confusion(tape, v_s, v_t)
    }

    /// Mean entropy of `q_k = p^st_k + p^st_{k+K}`.
    ///
    /// `ln q = log_softmax(ln(e^{v_s} + e^{v_t}))`, which stays in log space.
    /// To route this loss to `G` only, pass logits computed with detached head
    /// parameters.
    pub fn entropy_min(tape: &mut Tape, v_s: Var, v_t: Var) -> Result<Var> {
        check_pair(tape, v_s, v_t, "entropy_min")?;
        let merged = tape.log_add_exp(v_s, v_t)?;
        let log_q = tape.log_softmax_rows(merged);
        entropy_of_log_probs(tape, log_q)
    }

    /// Mean entropy of `softmax(logits)`, used by the `*_em` baselines.
    pub fn entropy_single(tape: &mut Tape, logits: Var) -> Result<Var> {
        let log_p = tape.log_softmax_rows(logits);
        entropy_of_log_probs(tape, log_p)
    }

    fn entropy_of_log_probs(tape: &mut Tape, log_p: Var) -> Result<Var> {
        let p = tape.exp(log_p);
        let plogp = tape.mul(p, log_p)?;
        let per_row = tape.sum_rows(plogp);
        let m = tape.mean(per_row);
        Ok(tape.scale(m, -1.0))
    }

    /// `−½ mean ln p^s_y − ½ mean ln p^t_y`, the "without confusion" ablation.
    pub fn two_head_supervised_degenerate(
        tape: &mut Tape,
        v_s: Var,
        v_t: Var,
        labels: &[usize],
    ) -> Result<Var> {
        check_pair(tape, v_s, v_t, "two_head_supervised_degenerate")?;
        let a = cross_entropy(tape, v_s, labels)?;
        let b = cross_entropy(tape, v_t, labels)?;
        let total = tape.add(a, b)?;
        Ok(tape.scale(total, 0.5))
    }

    fn check_scores(tape: &Tape, scores: Var, op: &'static str) -> Result<()> {
        if tape.value(scores).cols() != 1 {
            return Err(Error::shape(op, "discriminator scores must be a single column"));
        }
        Ok(())
    }

    /// Discriminator loss on raw scores `z`, with `D = σ(z)` the probability of
    /// the target domain: `−mean_s ln(1 − D) − mean_t ln D`.
    pub fn dc_discriminator(tape: &mut Tape, src_scores: Var, tgt_scores: Var) -> Result<Var> {
        check_scores(tape, src_scores, "dc_discriminator")?;
        check_scores(tape, tgt_scores, "dc_discriminator")?;
        let neg_src = tape.scale(src_scores, -1.0);
        let log_not_d_src = tape.log_sigmoid(neg_src);
        let log_d_tgt = tape.log_sigmoid(tgt_scores);
        let a = tape.mean(log_not_d_src);
        let b = tape.mean(log_d_tgt);
        let total = tape.add(a, b)?;
        Ok(tape.scale(total, -1.0))
    }

    /// Domain-confusion loss for `G`, evaluated term by term as
    /// `½ E_domain − ½ mean_s ln D − ½ mean_t ln(1 − D)`.
    pub fn dc_confusion(tape: &mut Tape, src_scores: Var, tgt_scores: Var) -> Result<Var> {
        let e_domain = dc_discriminator(tape, src_scores, tgt_scores)?;
        let half = tape.scale(e_domain, 0.5);
        let log_d_src = tape.log_sigmoid(src_scores);
        let neg_tgt = tape.scale(tgt_scores, -1.0);
        let log_not_d_tgt = tape.log_sigmoid(neg_tgt);
        let a = tape.mean(log_d_src);
        let b = tape.mean(log_not_d_tgt);
        let flipped = tape.add(a, b)?;
        let flipped = tape.scale(flipped, -0.5);
        tape.add(half, flipped)
    }
}

/// Logit nodes of a SymNet recorded for one batch.
struct Recorded {
    tape: Tape,
    v_s: Var,
    v_t: Var,
}

fn record_symnet(model: &SymNet, inputs: &Matrix) -> Result<Recorded> {
    let mut tape = Tape::new();
    let g = model.g.bind(&mut tape);
    let cs = model.cs.bind(&mut tape);
    let ct = model.ct.bind(&mut tape);
    let x = tape.leaf(inputs.clone());
    let f = model.g.record(&mut tape, &g, x)?;
    let v_s = crate::model::ClassifierHead::record(&mut tape, &cs, f)?;
    let v_t = crate::model::ClassifierHead::record(&mut tape, &ct, f)?;
    Ok(Recorded { tape, v_s, v_t })
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= k) {
        Some(y) => Err(Error::invalid(format!(
            "label {y} out of range for {k} categories"
        ))),
        None => Ok(()),
    }
}

fn eval_labeled(
    model: &SymNet,
    src: &LabeledBatch,
    build: impl FnOnce(&mut Tape, Var, Var, &[usize]) -> Result<Var>,
) -> Result<f64> {
    check_labels(&src.labels, model.cs.num_categories())?;
    let mut r = record_symnet(model, &src.inputs)?;
    let loss = build(&mut r.tape, r.v_s, r.v_t, &src.labels)?;
    Ok(r.tape.scalar(loss))
}

fn eval_unlabeled(
    model: &SymNet,
    tgt: &UnlabeledBatch,
    build: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut r = record_symnet(model, &tgt.inputs)?;
    let loss = build(&mut r.tape, r.v_s, r.v_t)?;
    Ok(r.tape.scalar(loss))
}

/// Cross-entropy of `Cs` on source samples.
pub fn loss_task_source(model: &SymNet, src: &LabeledBatch) -> Result<f64> {
    eval_labeled(model, src, |t, vs, _, y| graph::task_source(t, vs, y))
}

/// Cross-entropy of `Ct` on the same source samples.
pub fn loss_task_target_crossdomain(model: &SymNet, src: &LabeledBatch) -> Result<f64> {
    eval_labeled(model, src, |t, _, vt, y| graph::task_target_crossdomain(t, vt, y))
}

pub fn loss_domain_discrimination(model: &SymNet, src: &LabeledBatch, tgt: &UnlabeledBatch) -> Result<f64> {
    let mut r = record_symnet(model, &src.inputs)?;
    let g = model.g.bind(&mut r.tape);
    let cs = model.cs.bind(&mut r.tape);
    let ct = model.ct.bind(&mut r.tape);
    let x = r.tape.leaf(tgt.inputs.clone());
    let f = model.g.record(&mut r.tape, &g, x)?;
    let ts = crate::model::ClassifierHead::record(&mut r.tape, &cs, f)?;
    let tt = crate::model::ClassifierHead::record(&mut r.tape, &ct, f)?;
    let loss = graph::domain_discrimination(&mut r.tape, (r.v_s, r.v_t), (ts, tt))?;
    Ok(r.tape.scalar(loss))
}

pub fn loss_category_confusion(model: &SymNet, src: &LabeledBatch) -> Result<f64> {
    eval_labeled(model, src, graph::category_confusion)
}

pub fn loss_domain_confusion_target(model: &SymNet, tgt: &UnlabeledBatch) -> Result<f64> {
    eval_unlabeled(model, tgt, graph::domain_confusion_target)
}

pub fn loss_entropy_min(model: &SymNet, tgt: &UnlabeledBatch) -> Result<f64> {
    eval_unlabeled(model, tgt, graph::entropy_min)
}

pub fn loss_domain_confusion_source_degenerate(model: &SymNet, src: &LabeledBatch) -> Result<f64> {
    eval_labeled(model, src, |t, vs, vt, _| {
        graph::domain_confusion_source_degenerate(t, vs, vt)
    })
}

pub fn loss_two_head_supervised_degenerate(model: &SymNet, src: &LabeledBatch) -> Result<f64> {
    eval_labeled(model, src, graph::two_head_supervised_degenerate)
}

/// Source cross-entropy of a baseline's single head.
pub fn baseline_dc_task(model: &BaselineNet, src: &LabeledBatch) -> Result<f64> {
    check_labels(&src.labels, model.head.num_categories())?;
    let mut tape = Tape::new();
    let f = tape.leaf(model.g.forward(&src.inputs)?);
    let h = model.head.bind(&mut tape);
    let v = crate::model::ClassifierHead::record(&mut tape, &h, f)?;
    let loss = graph::cross_entropy(&mut tape, v, &src.labels)?;
    Ok(tape.scalar(loss))
}

fn eval_discriminator(
    model: &BaselineNet,
    src_features: &Matrix,
    tgt_features: &Matrix,
    build: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let d = model.disc.bind(&mut tape);
    let fs = tape.leaf(src_features.clone());
    let ft = tape.leaf(tgt_features.clone());
    let zs = crate::model::DomainDiscriminator::record(&mut tape, &d, fs)?;
    let zt = crate::model::DomainDiscriminator::record(&mut tape, &d, ft)?;
    let loss = build(&mut tape, zs, zt)?;
    Ok(tape.scalar(loss))
}

/// Discriminator loss on precomputed features.
pub fn baseline_dc_discriminator(
    model: &BaselineNet,
    src_features: &Matrix,
    tgt_features: &Matrix,
) -> Result<f64> {
    eval_discriminator(model, src_features, tgt_features, graph::dc_discriminator)
}

/// Domain-confusion loss on precomputed features.
pub fn baseline_dc_confusion(
    model: &BaselineNet,
    src_features: &Matrix,
    tgt_features: &Matrix,
) -> Result<f64> {
    eval_discriminator(model, src_features, tgt_features, graph::dc_confusion)
}
