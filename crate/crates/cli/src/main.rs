//! `saef`: generate synthetic task streams, train adapters, build expert
//! forests and evaluate them.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use saef_core::SaefError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] SaefError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(SaefError::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "saef", version, about = "Semantic adaptive expert forest toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every subcommand. Precedence: flags, then
/// `--config`, then the configuration stored in the input bundle (or the
/// built-in defaults for `generate`).
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// key=value configuration file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Fusion temperature
    #[arg(long, value_name = "F")]
    pub tau: Option<f64>,
    /// Early-exit entropy threshold
    #[arg(long = "tau-e", value_name = "F")]
    pub tau_e: Option<f64>,
    /// Tree count: auto, flat or an integer
    #[arg(long, value_name = "auto|flat|INT")]
    pub k: Option<String>,
    #[arg(long, value_name = "balanced|unlimited")]
    pub strategy: Option<String>,
    /// Extra overrides, e.g. `--set lambda=0`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Tau,
    #[value(name = "tau_e", alias = "tau-e")]
    TauE,
    K,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a bundle holding a fresh synthetic world
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train one adapter per task and store them in the bundle
    Train {
        bundle: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Also write the per-epoch training log as CSV
        #[arg(long, value_name = "PATH")]
        log_csv: Option<PathBuf>,
    },
    /// Cluster the tasks and build the expert forest
    Build {
        bundle: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Evaluate the forest over the whole stream
    Evaluate {
        bundle: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Metrics CSV
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        run_id: String,
        /// Per-stage accuracy CSV
        #[arg(long, value_name = "PATH")]
        per_task: Option<PathBuf>,
        /// Per-sample trace CSV for the final stage
        #[arg(long, value_name = "PATH")]
        traces: Option<PathBuf>,
    },
    /// Evaluate over a grid of one parameter, one CSV row per value
    Sweep {
        bundle: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long, default_value = "sweep")]
        run_id: String,
    },
    /// Evaluate the flat full-ensemble baseline
    BaselineFlat {
        bundle: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long, default_value = "flat")]
        run_id: String,
        #[arg(long, value_name = "PATH")]
        per_task: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        traces: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { cfg, out } => commands::generate(&cfg, &out),
        Command::Train { bundle, cfg, out, log_csv } => commands::train(&bundle, &cfg, &out, log_csv.as_deref()),
        Command::Build { bundle, cfg, out } => commands::build(&bundle, &cfg, &out),
        Command::Evaluate { bundle, cfg, out, run_id, per_task, traces } => commands::evaluate(
            &bundle,
            &cfg,
            commands::EvalOutputs { csv: out.as_deref(), per_task: per_task.as_deref(), traces: traces.as_deref() },
            &run_id,
            false,
        ),
        Command::Sweep { bundle, cfg, param, values, out, run_id } => {
            commands::sweep(&bundle, &cfg, param, &values, out.as_deref(), &run_id)
        }
        Command::BaselineFlat { bundle, cfg, out, run_id, per_task, traces } => commands::evaluate(
            &bundle,
            &cfg,
            commands::EvalOutputs { csv: out.as_deref(), per_task: per_task.as_deref(), traces: traces.as_deref() },
            &run_id,
            true,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SAEF_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
