//! `nae`: data generation, training, prediction, evaluation, and catch
//! simulation for the acceleration-estimator pipeline. Every subcommand is
//! driven by one TOML config (flags override fields), writes a resolved copy
//! of it next to its outputs, and embeds the config hash in every artifact.

// Validation uses `!(x > 0.0)` so NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod svg;

use clap::{Args, Parser, Subcommand};
use config::{load_config, Metric, RunConfig, TrainMode};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "nae",
    version,
    about = "Trajectory prediction and interception for in-flight objects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of throws and write it as JSON lines.
    GenData(GenDataArgs),
    /// Train the acceleration estimator, supervised or through the filter.
    Train(TrainArgs),
    /// Forecast the remainder of each trajectory from an observed prefix.
    Predict(PredictArgs),
    /// Leading-time, error-curve, and generalization reports.
    Eval(EvalArgs),
    /// Closed-loop catch simulation against a predictor or baseline.
    CatchSim(CatchSimArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of trajectories to simulate.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training dataset (JSON lines).
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Training stage.
    #[arg(long, value_enum)]
    mode: Option<TrainMode>,
    /// Checkpoint to fine-tune from (naedf mode).
    #[arg(long, value_name = "FILE")]
    warm_start: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Observed frames fed to the predictor.
    #[arg(long)]
    prefix_frames: Option<usize>,
    /// Frames to forecast past the prefix.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoints to evaluate (the Newton baseline is always included).
    #[arg(long = "checkpoint", value_name = "FILE")]
    checkpoints: Vec<PathBuf>,
    /// Datasets to evaluate on; generalization accepts several.
    #[arg(long = "dataset", value_name = "FILE", required = true)]
    datasets: Vec<PathBuf>,
    /// Metrics to compute (comma-separated), overriding the config.
    #[arg(long, value_enum, value_delimiter = ',')]
    metrics: Option<Vec<Metric>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "snake_case")]
enum Baseline {
    Newton,
    Oracle,
}

#[derive(Args)]
struct CatchSimArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Throws to simulate (JSON-lines dataset).
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Learned predictor to drive the effector.
    #[arg(long, value_name = "FILE", conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Analytic predictor to drive the effector.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
}

/// Errors carrying their exit code: 2 invalid config/arguments, 3 missing
/// file or I/O, 4 schema/parse, 5 training divergence, 6 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Io(String),
    Schema(String),
    Training(String),
    Numerical(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Invalid(_) => "invalid-config",
            CliError::Io(_) => "io",
            CliError::Schema(_) => "schema",
            CliError::Training(_) => "training-diverged",
            CliError::Numerical(_) => "numerical",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Invalid(m)
            | CliError::Io(m)
            | CliError::Schema(m)
            | CliError::Training(m)
            | CliError::Numerical(m) => m,
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Io(_) => 3,
            CliError::Schema(_) => 4,
            CliError::Training(_) => 5,
            CliError::Numerical(_) => 6,
        }
    }
}

impl From<nae_core::Error> for CliError {
    fn from(e: nae_core::Error) -> Self {
        use nae_core::Error as E;
        let message = e.to_string();
        match e {
            E::InvalidArgument(_) => CliError::Invalid(message),
            E::Parse { .. } | E::Json(_) => CliError::Schema(message),
            E::Io(_) => CliError::Io(message),
            E::TrainingDiverged { .. } => CliError::Training(message),
            E::Numerical(_) | E::SimulationDiverged { .. } | E::UndefinedRate(_) => {
                CliError::Numerical(message)
            }
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let record = serde_json::json!({
            "error": e.kind(),
            "message": e.message(),
            "exit_code": e.exit_code(),
        });
        eprintln!("{record}");
        std::process::exit(e.exit_code());
    }
}

fn resolve(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => {
            let mut cfg = resolve(&args.common)?;
            if let Some(count) = args.count {
                cfg.dataset.count = count;
            }
            commands::gen_data(&commands::Ctx::prepare(cfg)?)
        }
        Command::Train(args) => {
            let mut cfg = resolve(&args.common)?;
            if let Some(mode) = args.mode {
                cfg.train.mode = mode;
            }
            if let Some(warm) = &args.warm_start {
                cfg.train.warm_start = Some(warm.clone());
            }
            if let Some(epochs) = args.epochs {
                cfg.train.epochs = epochs;
            }
            commands::train(&commands::Ctx::prepare(cfg)?, &args.dataset)
        }
        Command::Predict(args) => {
            let mut cfg = resolve(&args.common)?;
            if let Some(k) = args.prefix_frames {
                cfg.predict.prefix_frames = k;
            }
            if let Some(h) = args.horizon {
                cfg.predict.horizon = h;
            }
            commands::predict(&commands::Ctx::prepare(cfg)?, &args.checkpoint, &args.dataset)
        }
        Command::Eval(args) => {
            let mut cfg = resolve(&args.common)?;
            if let Some(metrics) = &args.metrics {
                cfg.eval.metrics = metrics.clone();
            }
            commands::eval(&commands::Ctx::prepare(cfg)?, &args.checkpoints, &args.datasets)
        }
        Command::CatchSim(args) => {
            let cfg = resolve(&args.common)?;
            let source = match (&args.checkpoint, args.baseline) {
                (Some(path), None) => commands::CatchSource::Checkpoint(path.clone()),
                (None, Some(Baseline::Newton)) => commands::CatchSource::Newton,
                (None, Some(Baseline::Oracle)) => commands::CatchSource::Oracle,
                _ => {
                    return Err(CliError::Invalid(
                        "catch-sim needs exactly one of --checkpoint or --baseline".into(),
                    ))
                }
            };
            commands::catch_sim(&commands::Ctx::prepare(cfg)?, &args.dataset, source)
        }
    }
}
