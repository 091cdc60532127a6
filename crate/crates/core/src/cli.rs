//! Command line front end. Every command writes `run.toml` (arguments,
//! effective configuration, seed, versions) next to its outputs.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_dataset, ContrastSpec, DatasetSpec, LoadingSpec, Split};
use crate::deq::DeqConfig;
use crate::error::{ensure, Error, Result};
use crate::experiments::{equivalent_slices, extrapolate};
use crate::format::{load_checkpoint, load_dataset, read_toml, save_checkpoint, save_dataset, to_toml, write_atomic};
use crate::loss::LossMode;
use crate::metrics::{evaluate, evaluate_mean_field, rollout, rollout_csv};
use crate::operators::{Model, ModelConfig, OperatorKind};
use crate::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "therino", version, about = "Iterative neural operators for periodic elastic localization")]
pub struct Cli {
    /// Structured-text configuration with [dataset], [model] and [train]
    /// sections; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate microstructures and loadings (and solve labels unless --no-solve).
    Generate(GenerateArgs),
    /// Solve oracle labels for every unlabeled sample of a dataset.
    Solve(SolveArgs),
    /// Train one operator kind.
    Train(TrainArgs),
    /// Error metrics of a checkpoint on a split.
    Eval(EvalArgs),
    /// Per-iteration residual, alignment and error traces.
    Rollout(RolloutArgs),
    /// Re-evaluate at a fixed out-of-distribution contrast.
    Extrapolate(ExtrapolateArgs),
    /// Constant-z equivalent strain and stress slices.
    ExportSlices(SliceArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LoadingArg {
    UniaxialXx,
    Random6Sphere,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed contrast for every sample.
    #[arg(long, conflicts_with = "kappa_set")]
    pub kappa: Option<f64>,
    /// Comma-separated contrasts drawn uniformly per sample.
    #[arg(long, value_delimiter = ',')]
    pub kappa_set: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub loading: Option<LoadingArg>,
    #[arg(long)]
    pub magnitude: Option<f64>,
    /// Only draw structures; run `solve` later.
    #[arg(long)]
    pub no_solve: bool,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kind: OperatorKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub loss: Option<LossMode>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub ifno_iters: Option<usize>,
    #[arg(long)]
    pub val_limit: Option<usize>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub train_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtrapolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 200.0)]
    pub kappa: f64,
    /// In-distribution contrast the degradation is measured against.
    #[arg(long, default_value_t = 100.0)]
    pub reference_kappa: f64,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SliceArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sample: u64,
    /// Also export the prediction of this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Plane index; the middle plane by default.
    #[arg(long)]
    pub z: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub width: Option<usize>,
    pub depth: Option<usize>,
    pub alpha: Option<f64>,
    pub ifno_iters: Option<usize>,
    pub deq: Option<DeqConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    pub dataset: DatasetSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a, T: Serialize> {
    command: &'a str,
    args: Vec<String>,
    package: &'static str,
    version: &'static str,
    unix_time: u64,
    seconds: f64,
    config: &'a T,
}

fn write_run<T: Serialize>(dir: &Path, command: &str, config: &T, started: Instant) -> Result<()> {
    let unix_time = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let m = RunManifest {
        command,
        args: std::env::args().collect(),
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        unix_time,
        seconds: started.elapsed().as_secs_f64(),
        config,
    };
    write_atomic(&dir.join("run.toml"), to_toml(&m)?.as_bytes())
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(p) => read_toml(p),
        None => Ok(ConfigFile::default()),
    }
}

fn take<T>(items: Vec<T>, limit: Option<usize>) -> Vec<T> {
    match limit {
        Some(n) => items.into_iter().take(n).collect(),
        None => items,
    }
}

fn cmd_generate(a: &GenerateArgs, cfg: &ConfigFile, t0: Instant) -> Result<()> {
    let mut spec = cfg.dataset.clone();
    if let Some(n) = a.samples {
        spec.samples = n;
    }
    if let Some(g) = a.grid {
        spec.grid = g;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(k) = a.kappa {
        spec.contrast = ContrastSpec::Fixed { kappa: k };
    }
    if let Some(ks) = &a.kappa_set {
        spec.contrast = ContrastSpec::Choice { values: ks.clone() };
    }
    let magnitude = a.magnitude.unwrap_or(match spec.loading {
        LoadingSpec::UniaxialXx { magnitude } | LoadingSpec::Random6Sphere { magnitude } => magnitude,
    });
    spec.loading = match a.loading {
        Some(LoadingArg::UniaxialXx) => LoadingSpec::UniaxialXx { magnitude },
        Some(LoadingArg::Random6Sphere) => LoadingSpec::Random6Sphere { magnitude },
        None => match spec.loading {
            LoadingSpec::UniaxialXx { .. } => LoadingSpec::UniaxialXx { magnitude },
            LoadingSpec::Random6Sphere { .. } => LoadingSpec::Random6Sphere { magnitude },
        },
    };
    let mut d = generate_dataset(&spec)?;
    if !a.no_solve {
        d.solve_labels()?;
    }
    save_dataset(&a.out, &d)?;
    log::info!("wrote {} samples to {}", d.samples.len(), a.out.display());
    write_run(&a.out, "generate", &spec, t0)
}

fn cmd_solve(a: &SolveArgs, t0: Instant) -> Result<()> {
    let mut d = load_dataset(&a.data)?;
    if let Some(t) = a.tol {
        d.spec.oracle.tol = t;
    }
    if let Some(m) = a.max_iters {
        d.spec.oracle.max_iters = m;
    }
    d.solve_labels()?;
    save_dataset(&a.data, &d)?;
    write_run(&a.data, "solve", &d.spec, t0)
}

#[derive(Debug, Serialize)]
struct TrainRun {
    model: ModelConfig,
    train: TrainConfig,
    data: PathBuf,
}

fn cmd_train(a: &TrainArgs, cfg: &ConfigFile, t0: Instant) -> Result<()> {
    let d = load_dataset(&a.data)?;
    let mut mc = ModelConfig::new(a.kind, d.grid());
    let ms = &cfg.model;
    mc.width = a.width.or(ms.width).unwrap_or(mc.width);
    mc.depth = a.depth.or(ms.depth).unwrap_or(mc.depth);
    mc.alpha = ms.alpha.unwrap_or(mc.alpha);
    mc.ifno_iters = a.ifno_iters.or(ms.ifno_iters).unwrap_or(mc.ifno_iters);
    if let Some(deq) = ms.deq {
        mc.deq = deq;
    }
    let mut tc = cfg.train.clone();
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.max_lr = a.lr.unwrap_or(tc.max_lr);
    tc.seed = a.seed.unwrap_or(tc.seed);
    tc.loss = a.loss.unwrap_or(tc.loss);
    tc.val_limit = a.val_limit.or(tc.val_limit);
    let tr = take(d.labeled(Split::Train)?, a.train_limit);
    let va = d.labeled(Split::Val)?;
    let mut model = Model::new(mc, tc.seed)?;
    log::info!("training {} ({} parameters) on {} samples", a.kind, model.params().len(), tr.len());
    let result = train(&mut model, &tr, &va, &tc);
    // the best checkpoint is kept even when training diverges
    save_checkpoint(&a.out, &model, Some(&tc), result.as_ref().ok())?;
    let history = result?;
    let mut csv = String::from("epoch,lr,train_loss,val_loss,mean_grad_norm,adjoint_unconverged\n");
    for e in &history.epochs {
        csv.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{}\n",
            e.epoch, e.lr, e.train_loss, e.val_loss, e.mean_grad_norm, e.adjoint_unconverged
        ));
    }
    write_atomic(&a.out.join("history.csv"), csv.as_bytes())?;
    write_run(
        &a.out,
        "train",
        &TrainRun {
            model: mc,
            train: tc,
            data: a.data.clone(),
        },
        t0,
    )
}

#[derive(Debug, Serialize)]
struct EvalRun<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    split: Split,
    limit: Option<usize>,
    model: ModelConfig,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    model: crate::metrics::MetricsReport,
    mean_field: crate::metrics::MetricsReport,
}

fn summary_toml(r: &crate::metrics::MetricsReport) -> crate::metrics::MetricsReport {
    let mut r = r.clone();
    r.per_sample.clear();
    r
}

fn cmd_eval(a: &EvalArgs, t0: Instant) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let d = load_dataset(&a.data)?;
    let samples = take(d.labeled(a.split)?, a.limit);
    let report = evaluate(&model, &samples)?;
    let baseline = evaluate_mean_field(&samples)?;
    println!("{}", report.summary());
    println!("{}", baseline.summary());
    write_atomic(&a.out.join("metrics.csv"), report.to_csv().as_bytes())?;
    let summary = EvalSummary {
        model: summary_toml(&report),
        mean_field: summary_toml(&baseline),
    };
    write_atomic(&a.out.join("metrics.toml"), to_toml(&summary)?.as_bytes())?;
    let run = EvalRun {
        checkpoint: &a.checkpoint,
        data: &a.data,
        split: a.split,
        limit: a.limit,
        model: model.config,
    };
    write_run(&a.out, "eval", &run, t0)
}

fn cmd_rollout(a: &RolloutArgs, t0: Instant) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    ensure!(model.kind().is_iterative(), InvalidArgument, "{} is not an iterative model", model.kind());
    let d = load_dataset(&a.data)?;
    let samples = take(d.labeled(a.split)?, a.limit);
    let traces = samples.iter().map(|s| rollout(&model, s, a.iters, false)).collect::<Result<Vec<_>>>()?;
    write_atomic(&a.out.join("rollout.csv"), rollout_csv(&traces).as_bytes())?;
    let run = EvalRun {
        checkpoint: &a.checkpoint,
        data: &a.data,
        split: a.split,
        limit: a.limit,
        model: model.config,
    };
    write_run(&a.out, "rollout", &run, t0)
}

#[derive(Debug, Serialize)]
struct ExtrapolateRun<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    split: Split,
    limit: Option<usize>,
    kappa: f64,
    reference_kappa: f64,
}

fn cmd_extrapolate(a: &ExtrapolateArgs, t0: Instant) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let d = load_dataset(&a.data)?;
    let samples: Vec<_> = d.split(a.split).take(a.limit.unwrap_or(usize::MAX)).collect();
    let r = extrapolate(&model, &samples, a.reference_kappa, a.kappa, &d.spec.oracle)?;
    println!("kappa {:>6}: {}", r.reference_kappa, r.reference.summary());
    println!("kappa {:>6}: {}", r.target_kappa, r.target.summary());
    println!(
        "degradation: l2-strain x{:.2} l2-stress x{:.2} vm x{:.2}",
        r.degradation.err_l2_strain, r.degradation.err_l2_stress, r.degradation.err_vm
    );
    write_atomic(&a.out.join("reference.csv"), r.reference.to_csv().as_bytes())?;
    write_atomic(&a.out.join("target.csv"), r.target.to_csv().as_bytes())?;
    let mut summary = r.clone();
    summary.reference.per_sample.clear();
    summary.target.per_sample.clear();
    write_atomic(&a.out.join("extrapolate.toml"), to_toml(&summary)?.as_bytes())?;
    let run = ExtrapolateRun {
        checkpoint: &a.checkpoint,
        data: &a.data,
        split: a.split,
        limit: a.limit,
        kappa: a.kappa,
        reference_kappa: a.reference_kappa,
    };
    write_run(&a.out, "extrapolate", &run, t0)
}

#[derive(Debug, Serialize)]
struct SliceRun<'a> {
    data: &'a Path,
    sample: u64,
    checkpoint: Option<&'a Path>,
    z: usize,
    files: Vec<String>,
}

fn cmd_slices(a: &SliceArgs, t0: Instant) -> Result<()> {
    let d = load_dataset(&a.data)?;
    let s = d
        .samples
        .iter()
        .find(|s| s.meta.id == a.sample)
        .ok_or_else(|| Error::Data(format!("no sample with id {}", a.sample)))?;
    let c = s.microstructure.to_stiffness()?;
    let z = a.z.unwrap_or(d.grid().nz / 2);
    let mut fields = Vec::new();
    if let Some(e) = &s.strain {
        fields.push(("true".to_string(), e.clone()));
    }
    if let Some(ck) = &a.checkpoint {
        let (model, _) = load_checkpoint(ck)?;
        let scales = s.scales()?;
        let pred = model.predict(&s.problem()?)?;
        fields.push((model.kind().name().to_string(), scales.unscale_field(&pred, crate::mandel::Quantity::Strain)));
    }
    ensure!(!fields.is_empty(), Data, "sample {} has no label and no checkpoint was given", a.sample);
    let mut files = Vec::new();
    for (name, e) in &fields {
        for sl in equivalent_slices(e, &c, z, &format!("{:06}_{name}", a.sample))? {
            for (ext, body) in [("csv", sl.to_csv()), ("pgm", sl.to_pgm())] {
                let f = format!("{}_z{z}.{ext}", sl.name);
                write_atomic(&a.out.join(&f), body.as_bytes())?;
                files.push(f);
            }
        }
    }
    let run = SliceRun {
        data: &a.data,
        sample: a.sample,
        checkpoint: a.checkpoint.as_deref(),
        z,
        files,
    };
    write_run(&a.out, "export-slices", &run, t0)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let t0 = Instant::now();
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, &cfg, t0),
        Command::Solve(a) => cmd_solve(a, t0),
        Command::Train(a) => cmd_train(a, &cfg, t0),
        Command::Eval(a) => cmd_eval(a, t0),
        Command::Rollout(a) => cmd_rollout(a, t0),
        Command::Extrapolate(a) => cmd_extrapolate(a, t0),
        Command::ExportSlices(a) => cmd_slices(a, t0),
    }
}

/// Parse `args`, run, and map the outcome to an exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
