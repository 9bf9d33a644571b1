//! Accuracy, the multi-method experiment driver, feature export, and
//! convergence curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{apply_shift, format_f64, gen_blobs, gen_two_moons, Dataset, Domain, ShiftSpec};
use crate::error::{Error, Result};
use crate::model::{Head, ModelConfig, Predictor};
use crate::numerics::argmax_rows;
use crate::seed;
use crate::training::{train, Method, ScheduleConfig, TrainData, TrainReport};

/// Fraction of rows whose argmax over `head`'s logits equals the label.
/// Ties go to the lowest category index.
pub fn accuracy(model: &impl Predictor, ds: &Dataset, head: Head) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("accuracy needs at least one labeled sample"));
    }
    let h = model
        .head(head)
        .ok_or_else(|| Error::invalid(format!("model has no {} head", head.as_str())))?;
    let logits = h.logits(&model.features(ds.inputs())?)?;
    let hits = argmax_rows(&logits)
        .iter()
        .zip(ds.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Where an experiment's source and target data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Source and target are independent draws; the target draw goes
    /// through `shift`.
    TwoMoons { n: usize, noise: f64, shift: ShiftSpec },
    /// Gaussian clusters; the target draw goes through `shift`.
    Blobs {
        k: usize,
        d: usize,
        n: usize,
        separation: f64,
        noise: f64,
        shift: ShiftSpec,
    },
    /// Fixed CSV files, identical for every seed.
    Files { source: PathBuf, target: PathBuf },
}

impl TaskSpec {
    /// Two moons with the target rotated by `degrees` about the origin.
    pub fn two_moons(n: usize, noise: f64, degrees: f64) -> Self {
        TaskSpec::TwoMoons {
            n,
            noise,
            shift: ShiftSpec::rotation_degrees(degrees),
        }
    }

    /// Source and target datasets for one seed.
    pub fn materialize(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let target_seed = seed::stream_seed(seed, "data.target");
        match self {
            TaskSpec::TwoMoons { n, noise, shift } => {
                let src = gen_two_moons(*n, *noise, seed)?;
                let draw = gen_two_moons(*n, *noise, target_seed)?;
                Ok((src, apply_shift(&draw, shift, seed)?))
            }
            TaskSpec::Blobs {
                k,
                d,
                n,
                separation,
                noise,
                shift,
            } => {
                let src = gen_blobs(*k, *d, *n, *separation, *noise, seed)?;
                let draw = gen_blobs(*k, *d, *n, *separation, *noise, target_seed)?;
                Ok((src, apply_shift(&draw, shift, seed)?))
            }
            TaskSpec::Files { source, target } => {
                let src = Dataset::load_csv(source)?.with_domain(Domain::Source);
                let tgt = Dataset::load_csv_with_categories(target, src.num_categories())?
                    .with_domain(Domain::Target);
                if src.input_dim() != tgt.input_dim() {
                    return Err(Error::invalid(format!(
                        "{} has {} features but {} has {}",
                        source.display(),
                        src.input_dim(),
                        target.display(),
                        tgt.input_dim()
                    )));
                }
                Ok((src, tgt))
            }
        }
    }
}

/// Hidden widths and feature width; input width and category count come from
/// the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden_dims: vec![64, 64],
            feature_dim: 32,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, input_dim: usize, num_categories: usize) -> ModelConfig {
        ModelConfig::new(input_dim, self.feature_dim, num_categories).with_hidden(self.hidden_dims.clone())
    }
}

/// How data is split for training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    /// Share of each domain held out for evaluation.
    pub test_fraction: f64,
    /// Train on every row and evaluate on the same rows.
    pub transductive: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            test_fraction: 0.3,
            transductive: false,
        }
    }
}

/// Training and evaluation sets for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub src_train: Dataset,
    pub tgt_train: Dataset,
    pub src_eval: Dataset,
    pub tgt_eval: Dataset,
}

impl Splits {
    pub fn new(src: Dataset, tgt: Dataset, protocol: &Protocol, seed: u64) -> Result<Self> {
        if protocol.transductive {
            return Ok(Splits {
                src_train: src.clone(),
                tgt_train: tgt.clone(),
                src_eval: src,
                tgt_eval: tgt,
            });
        }
        let (src_train, src_eval) = src.split_holdout(protocol.test_fraction, seed)?;
        let tgt_seed = seed::stream_seed(seed, "split.target");
        let (tgt_train, tgt_eval) = tgt.split_holdout(protocol.test_fraction, tgt_seed)?;
        Ok(Splits {
            src_train,
            tgt_train,
            src_eval,
            tgt_eval,
        })
    }

    pub fn as_train_data(&self) -> TrainData<'_> {
        TrainData {
            src_train: &self.src_train,
            tgt_train: &self.tgt_train,
            src_eval: &self.src_eval,
            tgt_eval: &self.tgt_eval,
        }
    }
}

/// A grid of methods × seeds on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub methods: Vec<Method>,
    pub task: TaskSpec,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("seeds must be distinct"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("at least one method is required"));
        }
        let mut methods = self.methods.clone();
        methods.sort_unstable();
        if methods.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("methods must be distinct"));
        }
        self.schedule.validate()
    }
}

/// Final accuracy of one head in one (method, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub seed: u64,
    pub head: Head,
    pub src_acc: f64,
    pub tgt_acc: f64,
}

/// Mean and standard error over seeds of the reported head's target accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub mean_tgt_acc: f64,
    pub stderr_tgt_acc: f64,
    pub seeds: usize,
}

/// Results of an experiment grid, plus every run's report.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub reports: Vec<TrainReport>,
}

/// `(mean, sd / √n)` with the n−1 sample standard deviation; zero error for n = 1.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl ResultTable {
    /// One row per method, in first-appearance order.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut methods: Vec<Method> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        methods
            .into_iter()
            .map(|m| {
                let accs: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == m && r.head == m.eval_head())
                    .map(|r| r.tgt_acc)
                    .collect();
                let (mean, stderr) = mean_and_stderr(&accs);
                AggregateRow {
                    method: m,
                    mean_tgt_acc: mean,
                    stderr_tgt_acc: stderr,
                    seeds: accs.len(),
                }
            })
            .collect()
    }

    pub fn mean_tgt_acc(&self, method: Method) -> Option<f64> {
        self.aggregate()
            .into_iter()
            .find(|a| a.method == method)
            .map(|a| a.mean_tgt_acc)
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from("method,seed,head,src_acc,tgt_acc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.method,
                r.seed,
                r.head.as_str(),
                format_f64(r.src_acc),
                format_f64(r.tgt_acc)
            );
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("method,mean_tgt_acc,stderr_tgt_acc\n");
        for a in self.aggregate() {
            let _ = writeln!(
                out,
                "{},{},{}",
                a.method,
                format_f64(a.mean_tgt_acc),
                format_f64(a.stderr_tgt_acc)
            );
        }
        out
    }

    /// Writes `results.csv`, `aggregate.csv`, and `reports/<method>_seed<seed>.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let reports = dir.join("reports");
        std::fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
        let results = dir.join("results.csv");
        std::fs::write(&results, self.rows_csv()).map_err(|e| Error::io(&results, e))?;
        let aggregate = dir.join("aggregate.csv");
        std::fs::write(&aggregate, self.aggregate_csv()).map_err(|e| Error::io(&aggregate, e))?;
        for r in &self.reports {
            r.write_csv(&reports.join(format!("{}_seed{}.csv", r.method, r.seed)))?;
        }
        Ok(())
    }
}

fn run_cell(spec: &ExperimentSpec, method: Method, seed: u64) -> Result<(Vec<ResultRow>, TrainReport)> {
    let (src, tgt) = spec.task.materialize(seed)?;
    let splits = Splits::new(src, tgt, &spec.protocol, seed)?;
    let config = spec
        .arch
        .model_config(splits.src_train.input_dim(), splits.src_train.num_categories());
    let out = train(method, &config, &spec.schedule, &splits.as_train_data(), seed)?;
    let heads: &[Head] = match method {
        Method::SymNetWoEtaskT => &[Head::Cs],
        m if m.is_symnet() => &[Head::Cs, Head::Ct],
        _ => &[Head::C],
    };
    let rows = heads
        .iter()
        .map(|&head| {
            Ok(ResultRow {
                method,
                seed,
                head,
                src_acc: accuracy(&out.network, &splits.src_eval, head)?,
                tgt_acc: accuracy(&out.network, &splits.tgt_eval, head)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, out.report))
}

/// Trains every (method, seed) cell. Cells run in parallel; the table is in
/// method-major, seed-minor order regardless.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<ResultTable> {
    spec.validate()?;
    let cells: Vec<(Method, u64)> = spec
        .methods
        .iter()
        .flat_map(|&m| spec.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(m, s)| run_cell(spec, m, s))
        .collect::<Result<Vec<_>>>()?;
    let mut table = ResultTable {
        rows: Vec::new(),
        reports: Vec::new(),
    };
    for (rows, report) in results {
        table.rows.extend(rows);
        table.reports.push(report);
    }
    Ok(table)
}

/// CSV of `G`'s output, `f0,...,f{d-1},label,domain`.
pub fn features_csv(model: &impl Predictor, ds: &Dataset) -> Result<String> {
    let f = model.features(ds.inputs())?;
    let mut out = String::new();
    for j in 0..f.cols() {
        let _ = write!(out, "f{j},");
    }
    out.push_str("label,domain\n");
    for (row, y) in f.row_iter().zip(ds.labels()) {
        for v in row {
            let _ = write!(out, "{},", format_f64(*v));
        }
        let _ = writeln!(out, "{y},{}", ds.domain().as_str());
    }
    Ok(out)
}

pub fn export_features(model: &impl Predictor, ds: &Dataset, path: &Path) -> Result<()> {
    let csv = features_csv(model, ds)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

/// Target error of each head at every checkpoint, one row per report and
/// checkpoint: `method,seed,epoch,p,tgt_err_cs,tgt_err_ct`. `tgt_err_ct` is
/// empty when the run has no `Ct` accuracy.
pub fn convergence_table(reports: &[TrainReport]) -> Result<String> {
    let grid = |r: &TrainReport| r.records.iter().map(|x| x.epoch).collect::<Vec<_>>();
    if let Some(first) = reports.first() {
        let expected = grid(first);
        if let Some(bad) = reports.iter().find(|r| grid(r) != expected) {
            return Err(Error::invalid(format!(
                "checkpoint grid of {} seed {} differs from {} seed {}",
                bad.method, bad.seed, first.method, first.seed
            )));
        }
    }
    let mut out = String::from("method,seed,epoch,p,tgt_err_cs,tgt_err_ct\n");
    for r in reports {
        for rec in &r.records {
            let ct = rec.acc_ct_tgt.map(|a| format_f64(1.0 - a)).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{ct}",
                r.method,
                r.seed,
                rec.epoch,
                format_f64(rec.p),
                format_f64(1.0 - rec.acc_cs_tgt)
            );
        }
    }
    Ok(out)
}

pub fn convergence_curves(reports: &[TrainReport], path: &Path) -> Result<()> {
    let csv = convergence_table(reports)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_two_moons;
    use crate::model::{Dense, SymNet};
    use crate::numerics::Matrix;
    use crate::training::TrainRecord;

    fn labeled(inputs: &[[f64; 2]], labels: &[usize]) -> Dataset {
        Dataset::new(
            Matrix::from_rows(inputs).unwrap(),
            labels.to_vec(),
            2,
            Domain::Target,
        )
        .unwrap()
    }

    /// A SymNet whose features are the inputs and whose heads echo them.
    fn identity_symnet() -> SymNet {
        let config = ModelConfig::new(2, 2, 2).with_hidden(vec![]);
        let mut m = SymNet::zeros(&config).unwrap();
        m.g.layers[0] = Dense {
            weight: Matrix::identity(2),
            bias: Matrix::zeros(1, 2),
        };
        m.cs.layer.weight = Matrix::identity(2);
        m.ct.layer.weight = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        m
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let m = identity_symnet();
        let ds = labeled(&[[1.0, 0.0], [0.0, 2.0], [3.0, 1.0], [0.5, 0.2]], &[0, 1, 1, 0]);
        assert_eq!(accuracy(&m, &ds, Head::Cs).unwrap(), 0.75);
        assert_eq!(accuracy(&m, &ds, Head::Ct).unwrap(), 0.25);
        assert!(accuracy(&m, &ds, Head::C).is_err());
    }

    #[test]
    fn ties_go_to_category_zero() {
        let config = ModelConfig::new(2, 2, 2).with_hidden(vec![]);
        let m = SymNet::zeros(&config).unwrap();
        let ds = labeled(&[[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]], &[0, 1, 1]);
        assert!((accuracy(&m, &ds, Head::Ct).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn accuracy_ignores_monotone_logit_transforms() {
        let mut m = identity_symnet();
        let ds = gen_two_moons(40, 0.1, 3).unwrap();
        let before = accuracy(&m, &ds, Head::Cs).unwrap();
        m.cs.layer.weight = m.cs.layer.weight.scale(3.5);
        m.cs.layer.bias = Matrix::filled(1, 2, -7.0);
        assert_eq!(accuracy(&m, &ds, Head::Cs).unwrap(), before);
    }

    #[test]
    fn stderr_over_seeds() {
        let (m, s) = mean_and_stderr(&[0.8, 0.9, 1.0]);
        assert!((m - 0.9).abs() < 1e-15);
        assert!((s - 0.1 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_stderr(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn spec_validation() {
        let spec = ExperimentSpec {
            methods: vec![Method::SymNet],
            task: TaskSpec::two_moons(50, 0.1, 30.0),
            arch: ArchConfig::default(),
            schedule: ScheduleConfig::default(),
            protocol: Protocol::default(),
            seeds: vec![1, 2],
        };
        assert!(spec.validate().is_ok());
        assert!(ExperimentSpec {
            seeds: vec![],
            ..spec.clone()
        }
        .validate()
        .is_err());
        assert!(ExperimentSpec {
            seeds: vec![3, 3],
            ..spec.clone()
        }
        .validate()
        .is_err());
        assert!(ExperimentSpec {
            methods: vec![],
            ..spec
        }
        .validate()
        .is_err());
    }

    #[test]
    fn task_spec_json_shape() {
        let t: TaskSpec =
            serde_json::from_str(r#"{"kind":"two_moons","n":10,"noise":0.1,"shift":{"rotation":0.5}}"#)
                .unwrap();
        let shift = ShiftSpec {
            rotation: 0.5,
            ..ShiftSpec::default()
        };
        assert_eq!(
            t,
            TaskSpec::TwoMoons {
                n: 10,
                noise: 0.1,
                shift
            }
        );
        assert!(serde_json::from_str::<TaskSpec>(r#"{"kind":"two_moons","n":10}"#).is_err());
    }

    #[test]
    fn transductive_protocol_evaluates_on_training_rows() {
        let src = gen_two_moons(20, 0.1, 1).unwrap();
        let tgt = gen_two_moons(20, 0.1, 2).unwrap();
        let p = Protocol {
            transductive: true,
            ..Protocol::default()
        };
        let s = Splits::new(src.clone(), tgt.clone(), &p, 0).unwrap();
        assert_eq!(s.tgt_eval, s.tgt_train);
        let s = Splits::new(src, tgt, &Protocol::default(), 0).unwrap();
        assert_eq!(s.src_train.len() + s.src_eval.len(), 20);
        assert_eq!(s.src_eval.len(), 6);
    }

    fn report(method: Method, epochs: &[usize]) -> TrainReport {
        TrainReport {
            method,
            seed: 1,
            records: epochs
                .iter()
                .map(|&e| TrainRecord {
                    epoch: e,
                    p: 0.5,
                    lambda: 0.1,
                    lr: 0.01,
                    loss_task_s: Some(0.3),
                    loss_task_t: None,
                    loss_domain_disc: None,
                    loss_cat_conf: None,
                    loss_dom_conf: None,
                    loss_entropy: None,
                    acc_cs_src: 1.0,
                    acc_cs_tgt: 0.75,
                    acc_ct_src: method.is_symnet().then_some(1.0),
                    acc_ct_tgt: method.is_symnet().then_some(0.5),
                })
                .collect(),
        }
    }

    #[test]
    fn convergence_rows_and_grid_check() {
        let table = convergence_table(&[
            report(Method::SymNet, &[1, 2]),
            report(Method::SourceOnly, &[1, 2]),
        ])
        .unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines[1].starts_with("symnet,1,1,"));
        assert!(lines[1].ends_with(&format!("{},{}", format_f64(0.25), format_f64(0.5))));
        assert!(lines[3].ends_with(&format!("{},", format_f64(0.25))));
        assert!(convergence_table(&[report(Method::SymNet, &[1, 2]), report(Method::SymNet, &[1])]).is_err());
    }
}
