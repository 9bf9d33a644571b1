//! Command-line driver: dataset generation, training, experiment grids,
//! evaluation, and feature export.
//!
//! Settings resolve as flags over `--config` JSON over built-in defaults. Each
//! command writes the resolved settings to `config.json` in its output
//! directory, and that file can be passed back through `--config`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use symnets::data::{Dataset, ShiftSpec};
use symnets::eval::{
    accuracy, convergence_curves, export_features, run_ablation, ArchConfig, ExperimentSpec, Protocol,
    Splits, TaskSpec,
};
use symnets::model::{Head, Network};
use symnets::seed;
use symnets::training::{train, Method, ScheduleConfig};

#[derive(Parser, Debug)]
#[command(
    name = "symnets",
    version,
    about = "Domain-symmetric networks on synthetic domain shifts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate source.csv and target.csv.
    Gen(GenArgs),
    /// Train one method on a source/target pair.
    Train(TrainArgs),
    /// Train methods × seeds and aggregate target accuracy.
    Ablation(AblationArgs),
    /// Accuracy of a checkpoint's heads on a labeled CSV.
    Eval(EvalArgs),
    /// Write feature-extractor outputs for a labeled CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum TaskKind {
    TwoMoons,
    Blobs,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON file with settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    #[arg(long, value_enum)]
    task: Option<TaskKind>,
    /// Samples per domain.
    #[arg(long)]
    n: Option<usize>,
    /// Standard deviation of generator noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Categories (blobs).
    #[arg(long)]
    k: Option<usize>,
    /// Input dimension (blobs).
    #[arg(long)]
    d: Option<usize>,
    /// Distance between neighboring blob centers.
    #[arg(long)]
    separation: Option<f64>,
    /// Target rotation in degrees.
    #[arg(long, allow_negative_numbers = true)]
    rotation: Option<f64>,
    /// Target translation, comma separated, one entry per input dimension.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    translation: Option<Vec<f64>>,
    /// Target scale factor.
    #[arg(long)]
    scale: Option<f64>,
    /// Extra Gaussian noise added to target inputs.
    #[arg(long)]
    shift_noise: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    feature_dim: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct ScheduleArgs {
    #[arg(long)]
    epochs: Option<usize>,
    /// Rows per domain in each batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    classifier_lr_multiplier: Option<f64>,
    /// Record metrics every this many epochs.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Hold λ at this value instead of following its schedule.
    #[arg(long, allow_negative_numbers = true)]
    lambda_fixed: Option<f64>,
    /// Let the head-group loss update the feature extractor too.
    #[arg(long)]
    classifier_updates_features: bool,
    /// Held-out share of each domain.
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Evaluate on the training rows instead of a held-out split.
    #[arg(long)]
    transductive: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    method: Option<Method>,
    /// Labeled source CSV.
    #[arg(long)]
    src: Option<PathBuf>,
    /// Target CSV; its labels are used only for evaluation.
    #[arg(long)]
    tgt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// `all` or a comma-separated list.
    #[arg(long, value_parser = parse_methods)]
    methods: Option<MethodList>,
    /// A range such as `1..10` (inclusive) or a comma-separated list.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    /// Source CSV; when given with --tgt, replaces generated data.
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled CSV to score.
    #[arg(long)]
    data: PathBuf,
    /// Restrict to one head; default is every head the checkpoint has.
    #[arg(long, value_parser = parse_head)]
    head: Option<Head>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug)]
struct MethodList(Vec<Method>);

#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

fn parse_methods(s: &str) -> std::result::Result<MethodList, String> {
    if s == "all" {
        return Ok(MethodList(Method::ALL.to_vec()));
    }
    s.split(',')
        .map(|m| m.trim().parse::<Method>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(MethodList)
}

fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<u64>()
            .map_err(|e| format!("bad seed {t:?}: {e}"))
    };
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(format!("empty seed range {s:?}"));
        }
        return Ok(SeedList((a..=b).collect()));
    }
    s.split(',')
        .map(num)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(SeedList)
}

fn parse_head(s: &str) -> std::result::Result<Head, String> {
    s.parse::<Head>().map_err(|e| e.to_string())
}

/// Data-generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DatasetParams {
    task: TaskKind,
    n: usize,
    noise: f64,
    k: usize,
    d: usize,
    separation: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            task: TaskKind::TwoMoons,
            n: 500,
            noise: 0.1,
            k: 3,
            d: 2,
            separation: 4.0,
        }
    }
}

/// Every setting a command can use, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    dataset: DatasetParams,
    shift: ShiftSpec,
    arch: ArchConfig,
    schedule: ScheduleConfig,
    protocol: Protocol,
    method: Method,
    methods: Vec<Method>,
    seed: u64,
    seeds: Vec<u64>,
    src: Option<PathBuf>,
    tgt: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetParams::default(),
            shift: ShiftSpec::rotation_degrees(30.0),
            arch: ArchConfig::default(),
            schedule: ScheduleConfig::default(),
            protocol: Protocol::default(),
            method: Method::SymNet,
            methods: Method::ALL.to_vec(),
            seed: 1,
            seeds: (1..=10).collect(),
            src: None,
            tgt: None,
            out: None,
        }
    }
}

impl RunConfig {
    fn load(common: &CommonArgs) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(out) = &common.out {
            cfg.out = Some(out.clone());
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => bail!("no output directory: pass --out or set \"out\" in the config"),
        }
    }

    fn apply_data(&mut self, a: &DataArgs) {
        let d = &mut self.dataset;
        set(&mut d.task, a.task);
        set(&mut d.n, a.n);
        set(&mut d.noise, a.noise);
        set(&mut d.k, a.k);
        set(&mut d.d, a.d);
        set(&mut d.separation, a.separation);
        if let Some(deg) = a.rotation {
            self.shift.rotation = deg.to_radians();
        }
        set(&mut self.shift.translation, a.translation.clone());
        set(&mut self.shift.scale, a.scale);
        set(&mut self.shift.noise_std, a.shift_noise);
    }

    fn apply_model(&mut self, a: &ModelArgs) {
        set(&mut self.arch.hidden_dims, a.hidden.clone());
        set(&mut self.arch.feature_dim, a.feature_dim);
    }

    fn apply_schedule(&mut self, a: &ScheduleArgs) {
        let s = &mut self.schedule;
        set(&mut s.total_epochs, a.epochs);
        set(&mut s.batch_size, a.batch_size);
        set(&mut s.eta0, a.eta0);
        set(&mut s.alpha, a.alpha);
        set(&mut s.beta, a.beta);
        set(&mut s.gamma, a.gamma);
        set(&mut s.momentum, a.momentum);
        set(&mut s.classifier_lr_multiplier, a.classifier_lr_multiplier);
        set(&mut s.eval_every, a.eval_every);
        if a.lambda_fixed.is_some() {
            s.lambda_fixed = a.lambda_fixed;
        }
        s.classifier_loss_updates_features |= a.classifier_updates_features;
        set(&mut self.protocol.test_fraction, a.test_fraction);
        self.protocol.transductive |= a.transductive;
    }

    fn generated_task(&self) -> TaskSpec {
        let d = &self.dataset;
        match d.task {
            TaskKind::TwoMoons => TaskSpec::TwoMoons {
                n: d.n,
                noise: d.noise,
                shift: self.shift.clone(),
            },
            TaskKind::Blobs => TaskSpec::Blobs {
                k: d.k,
                d: d.d,
                n: d.n,
                separation: d.separation,
                noise: d.noise,
                shift: self.shift.clone(),
            },
        }
    }

    fn file_pair(&self) -> Option<(PathBuf, PathBuf)> {
        Some((self.src.clone()?, self.tgt.clone()?))
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed_scheme: &'a str,
    seeds: Vec<u64>,
    config: &'a RunConfig,
    outputs: Vec<String>,
}

/// Writes `config.json` and `manifest.json` beside the command's outputs.
fn write_run_files(command: &str, cfg: &RunConfig, seeds: Vec<u64>, outputs: &[&str]) -> Result<()> {
    let dir = cfg.out_dir()?;
    write_json(&dir.join("config.json"), cfg)?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed_scheme: seed::SCHEME,
        seeds,
        config: cfg,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.common)?;
    cfg.apply_data(&args.data);
    set(&mut cfg.seed, args.seed);
    let dir = cfg.out_dir()?.to_path_buf();
    let (src, tgt) = cfg.generated_task().materialize(cfg.seed)?;
    create_dir(&dir)?;
    src.save_csv(&dir.join("source.csv"))?;
    tgt.save_csv(&dir.join("target.csv"))?;
    write_run_files("gen", &cfg, vec![cfg.seed], &["source.csv", "target.csv"])?;
    println!(
        "wrote {} source and {} target rows to {}",
        src.len(),
        tgt.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.common)?;
    cfg.apply_model(&args.model);
    cfg.apply_schedule(&args.schedule);
    set(&mut cfg.method, args.method);
    set(&mut cfg.seed, args.seed);
    if args.src.is_some() {
        cfg.src = args.src.clone();
    }
    if args.tgt.is_some() {
        cfg.tgt = args.tgt.clone();
    }
    let dir = cfg.out_dir()?.to_path_buf();
    let Some((src_path, tgt_path)) = cfg.file_pair() else {
        bail!("train needs --src and --tgt (or \"src\"/\"tgt\" in the config)");
    };
    let (src, tgt) = TaskSpec::Files {
        source: src_path,
        target: tgt_path,
    }
    .materialize(cfg.seed)?;
    let splits = Splits::new(src, tgt, &cfg.protocol, cfg.seed)?;
    let model = cfg
        .arch
        .model_config(splits.src_train.input_dim(), splits.src_train.num_categories());
    let out = train(
        cfg.method,
        &model,
        &cfg.schedule,
        &splits.as_train_data(),
        cfg.seed,
    )?;
    create_dir(&dir)?;
    out.network.save_json(&dir.join("checkpoint.json"))?;
    out.report.write_csv(&dir.join("report.csv"))?;
    write_run_files("train", &cfg, vec![cfg.seed], &["checkpoint.json", "report.csv"])?;
    if let Some(last) = out.report.last() {
        println!(
            "{} seed {}: target accuracy {:.4} ({} head)",
            cfg.method,
            cfg.seed,
            last.reported_tgt_acc(cfg.method),
            cfg.method.eval_head().as_str()
        );
    }
    Ok(())
}

fn cmd_ablation(args: &AblationArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.common)?;
    cfg.apply_data(&args.data);
    cfg.apply_model(&args.model);
    cfg.apply_schedule(&args.schedule);
    if let Some(MethodList(m)) = &args.methods {
        cfg.methods = m.clone();
    }
    if let Some(SeedList(s)) = &args.seeds {
        cfg.seeds = s.clone();
    }
    if args.src.is_some() {
        cfg.src = args.src.clone();
    }
    if args.tgt.is_some() {
        cfg.tgt = args.tgt.clone();
    }
    if cfg.src.is_some() != cfg.tgt.is_some() {
        bail!("--src and --tgt must be given together");
    }
    let dir = cfg.out_dir()?.to_path_buf();
    let task = match cfg.file_pair() {
        Some((source, target)) => TaskSpec::Files { source, target },
        None => cfg.generated_task(),
    };
    let spec = ExperimentSpec {
        methods: cfg.methods.clone(),
        task,
        arch: cfg.arch.clone(),
        schedule: cfg.schedule.clone(),
        protocol: cfg.protocol.clone(),
        seeds: cfg.seeds.clone(),
    };
    let table = run_ablation(&spec)?;
    create_dir(&dir)?;
    table.write(&dir)?;
    convergence_curves(&table.reports, &dir.join("curves.csv"))?;
    write_run_files(
        "ablation",
        &cfg,
        cfg.seeds.clone(),
        &["results.csv", "aggregate.csv", "curves.csv", "reports/"],
    )?;
    for a in table.aggregate() {
        println!(
            "{:30} {:.4} ± {:.4}",
            a.method.as_str(),
            a.mean_tgt_acc,
            a.stderr_tgt_acc
        );
    }
    Ok(())
}

fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Network, Dataset)> {
    let net = Network::load_json(checkpoint)?;
    let k = net.config().num_categories;
    let ds = Dataset::load_csv_with_categories(data, k)?;
    Ok((net, ds))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (net, ds) = load_pair(&args.checkpoint, &args.data)?;
    let heads: Vec<Head> = match (args.head, &net) {
        (Some(h), _) => vec![h],
        (None, Network::SymNet(_)) => vec![Head::Cs, Head::Ct],
        (None, Network::Baseline(_)) => vec![Head::C],
    };
    let mut csv = String::from("head,accuracy,samples\n");
    for h in heads {
        let acc = accuracy(&net, &ds, h)?;
        csv.push_str(&format!("{},{},{}\n", h.as_str(), acc, ds.len()));
        println!("{}: {:.4} on {} samples", h.as_str(), acc, ds.len());
    }
    create_dir(&args.out)?;
    let path = args.out.join("eval.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let (net, ds) = load_pair(&args.checkpoint, &args.data)?;
    create_dir(&args.out)?;
    let path = args.out.join("features.csv");
    export_features(&net, &ds, &path)?;
    println!("wrote {} feature rows to {}", ds.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablation(a) => cmd_ablation(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportFeatures(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
