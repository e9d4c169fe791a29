//! The `slbl` command line.
//!
//! Every subcommand prints one JSON document on stdout. Without `--json` a
//! short human-readable summary also goes to stderr. Settings come from
//! built-in defaults, then the TOML file given by `--config`, then flags.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
//! data file cannot be read or the computation fails.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::diversity::{diversity_report, Bandwidth};
use crate::error::Error;
use crate::features::FeatureMatrix;
use crate::store::{
    compression_report, decode_store, encode_store, storage_breakdown, Baseline, StoreShape,
};
use crate::synth::{
    compute_class_stats, synthesize_class_batch, synthesize_independent, Optimizer, SynthConfig,
    SynthMode,
};
use crate::trainer::{
    generate_task, pareto_sweep, relabel, train_student, DistilledSource, RelabelConfig,
    SweepConfig, Task, TaskSpec, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "slbl",
    version,
    about = "Soft-label stores: relabel, inspect, train and sweep"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Print only the JSON report (no summary on stderr).
    #[arg(long, global = true)]
    json: bool,

    /// Random seed for every stochastic step.
    #[arg(long, global = true, env = "SLBL_SEED")]
    seed: Option<u64>,

    /// TOML file with [task], [relabel], [train], [synth] and [pareto] tables.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic task directory (data splits, teacher, distilled set).
    Gen(GenArgs),
    /// Replay augmentations on the distilled set and write a label store.
    Relabel(RelabelArgs),
    /// Byte breakdown and compression ratios of a label store.
    Inspect(InspectArgs),
    /// Train a student from a label store and report its trace.
    Train(TrainArgs),
    /// Within-class cosine and MMD of a feature file.
    Metrics(MetricsArgs),
    /// Synthesize a distilled set from a task's statistics and teacher.
    Synth(SynthArgs),
    /// Sweep pruning rates and top-k values and mark the Pareto front.
    Pareto(ParetoArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DistilledKind {
    Noise,
    ClassWise,
    Independent,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    ClassWise,
    Independent,
}

impl From<ModeArg> for SynthMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ClassWise => SynthMode::ClassWise,
            ModeArg::Independent => SynthMode::Independent,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Gd,
    Adam,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    /// Distilled images per class.
    #[arg(long)]
    ipc: Option<usize>,
    /// How the distilled set is built.
    #[arg(long, value_enum)]
    distilled: Option<DistilledKind>,
}

#[derive(Debug, Args)]
struct RelabelArgs {
    /// Task directory written by `gen`.
    #[arg(long)]
    task: PathBuf,
    /// Output label store.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pruning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Keep the k largest logits per sample; 0 keeps all of them.
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Label store file.
    store: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    /// Anneal the teacher temperature (`--dkr false` uses the fixed temperature).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    dkr: Option<bool>,
    /// Calibrate the student temperature every epoch.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    ca: Option<bool>,
    /// Teacher temperature when annealing is off.
    #[arg(long)]
    fixed_tau: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    tau_squared: Option<bool>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    shuffle_reuse: Option<bool>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Feature file to score.
    #[arg(long)]
    features: PathBuf,
    /// Reference set for MMD.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Fixed kernel bandwidth; the median heuristic is used when omitted.
    #[arg(long)]
    bandwidth: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "class-wise")]
    mode: ModeArg,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    /// Samples per class.
    #[arg(long)]
    ipc: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
}

#[derive(Debug, Args)]
struct ParetoArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pruning_rates: Option<Vec<f64>>,
    /// Comma-separated top-k values; 0 means full labels.
    #[arg(long, value_delimiter = ',')]
    top_k: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Number of seeds per configuration, counted up from `--seed`.
    #[arg(long)]
    seeds: Option<usize>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

/// Contents of the `--config` file. Every table and field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: Option<u64>,
    pub task: TaskSpec,
    pub relabel: RelabelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub pareto: ParetoSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParetoSettings {
    pub pruning_rates: Vec<f64>,
    pub top_k: Vec<usize>,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seeds: usize,
    pub jobs: usize,
}

impl Default for ParetoSettings {
    fn default() -> Self {
        Self {
            pruning_rates: vec![0.0, 0.5, 0.8, 0.9],
            top_k: vec![0, 4, 2, 1],
            total_epochs: 300,
            batch_size: 10,
            seeds: 3,
            jobs: 0,
        }
    }
}

impl CliConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the command line with `args` (including the program name) and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<CliConfig> {
    let Some(path) = path else {
        return Ok(CliConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    CliConfig::from_toml(&text)
        .map_err(|e| Failure::Usage(format!("bad config {}: {e}", path.display())))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn emit<R: Serialize>(json: bool, report: &R, summary: impl FnOnce() -> String) -> CliResult<()> {
    let text = if json {
        serde_json::to_string(report)
    } else {
        serde_json::to_string_pretty(report)
    }
    .map_err(Error::from)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            return Err(Failure::Data(e.into()))
        }
        _ => {}
    }
    if !json {
        eprint!("{}", summary());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let config = load_config(cli.config.as_deref())?;
    let seed = cli.seed.or(config.seed);
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli.json, seed, config, a),
        Command::Relabel(a) => cmd_relabel(cli.json, seed, config, a),
        Command::Inspect(a) => cmd_inspect(cli.json, a),
        Command::Train(a) => cmd_train(cli.json, seed, config, a),
        Command::Metrics(a) => cmd_metrics(cli.json, a),
        Command::Synth(a) => cmd_synth(cli.json, seed, config, a),
        Command::Pareto(a) => cmd_pareto(cli.json, seed, config, a),
    }
}

#[derive(Serialize)]
struct GenReport {
    out: PathBuf,
    spec: TaskSpec,
    train_samples: usize,
    test_samples: usize,
    distilled_samples: usize,
    teacher_test_accuracy: f64,
    degenerate: bool,
}

fn cmd_gen(json: bool, seed: Option<u64>, config: CliConfig, a: &GenArgs) -> CliResult<()> {
    let mut spec = config.task;
    set(&mut spec.seed, seed);
    set(&mut spec.num_classes, a.classes);
    set(&mut spec.dim, a.dim);
    set(&mut spec.train_per_class, a.train_per_class);
    set(&mut spec.test_per_class, a.test_per_class);
    set(&mut spec.separation, a.separation);
    set(&mut spec.ipc, a.ipc);
    if let Some(kind) = a.distilled {
        spec.distilled = match kind {
            DistilledKind::Noise => DistilledSource::Noise { scale: 1.0 },
            DistilledKind::ClassWise => DistilledSource::Synth {
                mode: SynthMode::ClassWise,
                config: config.synth,
            },
            DistilledKind::Independent => DistilledSource::Synth {
                mode: SynthMode::Independent,
                config: config.synth,
            },
        };
    }
    let task = generate_task(&spec)?;
    if task.degenerate {
        log::warn!("class blobs coincide (separation 0); accuracy is at chance");
    }
    task.write_dir(&a.out)?;
    let report = GenReport {
        out: a.out.clone(),
        spec,
        train_samples: task.train.len(),
        test_samples: task.test.len(),
        distilled_samples: task.distilled.len(),
        teacher_test_accuracy: task.teacher.accuracy(&task.test),
        degenerate: task.degenerate,
    };
    emit(json, &report, || {
        format!(
            "task written to {}\n  classes {}  dim {}  distilled {}  teacher accuracy {:.4}\n",
            report.out.display(),
            spec.num_classes,
            spec.dim,
            report.distilled_samples,
            report.teacher_test_accuracy
        )
    })
}

#[derive(Serialize)]
struct RelabelReport {
    out: PathBuf,
    config: RelabelConfig,
    shape: StoreShape,
    bytes: usize,
}

fn cmd_relabel(json: bool, seed: Option<u64>, config: CliConfig, a: &RelabelArgs) -> CliResult<()> {
    let mut cfg = config.relabel;
    set(&mut cfg.seed, seed);
    set(&mut cfg.total_epochs, a.epochs);
    set(&mut cfg.pruning_rate, a.pruning_rate);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.top_k, a.top_k);
    let task = Task::read_dir(&a.task)?;
    let store = relabel(&task.distilled, &task.teacher, &cfg)?;
    let bytes = encode_store(&store)?;
    std::fs::write(&a.out, &bytes).map_err(Error::from)?;
    let report = RelabelReport {
        out: a.out.clone(),
        config: cfg,
        shape: store.shape,
        bytes: bytes.len(),
    };
    emit(json, &report, || {
        format!(
            "wrote {} ({} bytes): {} of {} epochs kept, {} batches per epoch, k = {}\n",
            report.out.display(),
            report.bytes,
            store.shape.retained_epochs,
            store.shape.total_epochs,
            store.shape.batches_per_epoch,
            store.shape.k
        )
    })
}

fn read_store(path: &Path) -> CliResult<crate::store::LabelStore> {
    let bytes = std::fs::read(path).map_err(Error::from)?;
    Ok(decode_store(&bytes)?)
}

#[derive(Serialize)]
struct InspectReport {
    shape: StoreShape,
    breakdown: crate::store::StorageBreakdown,
    compression: crate::store::CompressionReport,
}

fn cmd_inspect(json: bool, a: &InspectArgs) -> CliResult<()> {
    let store = read_store(&a.store)?;
    let breakdown = storage_breakdown(&store)?;
    let compression = compression_report(&breakdown, &Baseline::of(&store.shape))?;
    let report = InspectReport {
        shape: store.shape,
        breakdown,
        compression,
    };
    emit(json, &report, || {
        let mut s = format!("{:<16} {:>12} {:>9}\n", "component", "bytes", "fraction");
        for c in &report.breakdown.components {
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>9.4}",
                c.component.name(),
                c.bytes,
                c.fraction
            );
        }
        let _ = writeln!(s, "{:<16} {:>12}", "total", report.breakdown.total_bytes);
        let _ = writeln!(
            s,
            "logit ratio {:.2}x, file ratio {:.2}x",
            report.compression.theoretical_z_ratio, report.compression.actual_ratio
        );
        s
    })
}

fn cmd_train(json: bool, seed: Option<u64>, config: CliConfig, a: &TrainArgs) -> CliResult<()> {
    let mut cfg = config.train;
    set(&mut cfg.seed, seed);
    set(&mut cfg.learning_rate, a.lr);
    set(&mut cfg.dkr, a.dkr);
    set(&mut cfg.ca, a.ca);
    set(&mut cfg.fixed_tau, a.fixed_tau);
    set(&mut cfg.tau_squared, a.tau_squared);
    set(&mut cfg.label_smoothing, a.label_smoothing);
    set(&mut cfg.shuffle_reuse, a.shuffle_reuse);
    let task = Task::read_dir(&a.task)?;
    let store = read_store(&a.store)?;
    let result = train_student(&store, &task, &cfg)?;
    emit(json, &result, || {
        let mut s = format!(
            "trained {} epochs: accuracy {:.4}, final loss {:.5}\n",
            result.epoch_loss.len(),
            result.final_accuracy,
            result.epoch_loss.last().copied().unwrap_or(f64::NAN)
        );
        if let Some(t) = result.mean_calibrated_tau() {
            let _ = writeln!(s, "mean calibrated student temperature {t:.3}");
        }
        let _ = writeln!(
            s,
            "store {} bytes, logit ratio {:.2}x, file ratio {:.2}x",
            result.storage_bytes,
            result.compression.theoretical_z_ratio,
            result.compression.actual_ratio
        );
        s
    })
}

fn cmd_metrics(json: bool, a: &MetricsArgs) -> CliResult<()> {
    let features = FeatureMatrix::read(&a.features)?;
    let reference = a.reference.as_ref().map(FeatureMatrix::read).transpose()?;
    let bandwidth = a.bandwidth.map_or(Bandwidth::Median, Bandwidth::Fixed);
    let report = diversity_report(&features, reference.as_ref(), bandwidth)?;
    emit(json, &report, || {
        let mut s = format!(
            "within-class cosine {:.4} (std {:.4}) over {} classes\n",
            report.cosine.overall_mean,
            report.cosine.overall_std,
            report.cosine.per_class.len()
        );
        if let (Some(m), Some(b)) = (report.mmd_squared, report.bandwidth) {
            let _ = writeln!(s, "MMD^2 {m:.6} at bandwidth {b:.4}");
        }
        s
    })
}

#[derive(Serialize)]
struct ClassLoss {
    class_id: u32,
    initial_loss: f64,
    final_loss: f64,
}

#[derive(Serialize)]
struct SynthReport {
    out: PathBuf,
    mode: SynthMode,
    config: SynthConfig,
    classes: Vec<ClassLoss>,
}

fn cmd_synth(json: bool, seed: Option<u64>, config: CliConfig, a: &SynthArgs) -> CliResult<()> {
    let mut cfg = config.synth;
    set(&mut cfg.seed, seed);
    set(&mut cfg.alpha, a.alpha);
    set(&mut cfg.iterations, a.iterations);
    set(&mut cfg.step_size, a.step_size);
    set(&mut cfg.batch_size, a.ipc);
    if let Some(o) = a.optimizer {
        cfg.optimizer = match o {
            OptimizerArg::Gd => Optimizer::Gd,
            OptimizerArg::Adam => Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
        };
    }
    let mode = SynthMode::from(a.mode);
    let task = Task::read_dir(&a.task)?;
    let stats = compute_class_stats(&task.train)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut classes = Vec::new();
    for c in 0..stats.num_classes() {
        let batch = match mode {
            SynthMode::ClassWise => synthesize_class_batch(&task.teacher, &stats, c, &cfg)?,
            SynthMode::Independent => synthesize_independent(&task.teacher, &stats, c, &cfg)?,
        };
        classes.push(ClassLoss {
            class_id: batch.class_id,
            initial_loss: batch.initial_loss,
            final_loss: batch.final_loss,
        });
        labels.extend(std::iter::repeat_n(batch.class_id, batch.rows.len()));
        rows.extend(batch.rows);
    }
    FeatureMatrix::new(stats.dim(), stats.num_classes(), rows, labels)?
        .round_to_f32()
        .write(&a.out)?;
    let report = SynthReport {
        out: a.out.clone(),
        mode,
        config: cfg,
        classes,
    };
    emit(json, &report, || {
        let mut s = format!(
            "wrote {}\n{:>6} {:>12} {:>12}\n",
            report.out.display(),
            "class",
            "initial",
            "final"
        );
        for c in &report.classes {
            let _ = writeln!(
                s,
                "{:>6} {:>12.5} {:>12.5}",
                c.class_id, c.initial_loss, c.final_loss
            );
        }
        s
    })
}

fn cmd_pareto(json: bool, seed: Option<u64>, config: CliConfig, a: &ParetoArgs) -> CliResult<()> {
    let mut p = config.pareto;
    set(&mut p.pruning_rates, a.pruning_rates.clone());
    set(&mut p.top_k, a.top_k.clone());
    set(&mut p.total_epochs, a.epochs);
    set(&mut p.batch_size, a.batch_size);
    set(&mut p.seeds, a.seeds);
    set(&mut p.jobs, a.jobs);
    if p.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let base = seed.unwrap_or(config.train.seed);
    let sweep = SweepConfig {
        total_epochs: p.total_epochs,
        batch_size: p.batch_size,
        configs: p
            .pruning_rates
            .iter()
            .flat_map(|&r| p.top_k.iter().map(move |&k| (r, k)))
            .collect(),
        seeds: (0..p.seeds as u64).map(|i| base + i).collect(),
        train: config.train,
        jobs: p.jobs,
    };
    let task = Task::read_dir(&a.task)?;
    let table = pareto_sweep(&task, &sweep)?;
    emit(json, &table, || {
        let mut s = format!(
            "{:>6} {:>4} {:>10} {:>9} {:>9} {:>9}  front\n",
            "p", "k", "bytes", "z ratio", "ratio", "accuracy"
        );
        for r in &table.rows {
            let _ = writeln!(
                s,
                "{:>6.2} {:>4} {:>10} {:>9.2} {:>9.2} {:>9.4}  {}",
                r.pruning_rate,
                r.top_k,
                r.storage_bytes,
                r.theoretical_ratio,
                r.actual_ratio,
                r.mean_accuracy,
                if r.non_dominated { "*" } else { "" }
            );
        }
        s
    })
}
