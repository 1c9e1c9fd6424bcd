mod commands;
mod config;
mod metrics;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
/// 3 numeric abort.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn check(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::usage(message)
    }
}

impl From<mpsl_core::Error> for CliError {
    fn from(e: mpsl_core::Error) -> Self {
        match e {
            mpsl_core::Error::NonFinite { .. } => Self { code: 3, message: e.to_string() },
            other => Self::usage(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "mpsl", version, about = "Train and probe multi-plasticity spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config; writes metrics and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Accuracy under input corruptions, averaged over trials.
    Robustness(RobustnessArgs),
    /// Compare fixed, learnable and frozen-learned fusion coefficients.
    Ablate(AblateArgs),
    /// Compare tape gradients with the forward-mode reference.
    Gradcheck(GradcheckArgs),
    /// Dump penultimate-layer membrane potentials for embedding.
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PathFlag {
    /// Single merged matrix per layer (default).
    #[arg(long, conflicts_with = "unmerged")]
    merged: bool,
    /// Evaluate the three weight paths separately.
    #[arg(long)]
    unmerged: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Where to write the final checkpoint; defaults to `<out-dir>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    path: PathFlag,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated: gaussian, salt-pepper, center-crop.
    #[arg(long, value_delimiter = ',', default_value = "gaussian")]
    kinds: Vec<String>,
    /// Comma-separated levels; each kind's default grid when omitted.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[command(flatten)]
    path: PathFlag,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of seeds, counting up from the run seed.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Widen the backward surrogate window (negative control).
    #[arg(long, hide = true)]
    corrupt_surrogate: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 500)]
    n_samples: usize,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MPSL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::usage(format!("MPSL_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => commands::train(&a.common.config, a.common.seed, &a.common.out_dir, a.checkpoint),
        Command::Eval(a) => commands::eval(
            &a.common.config,
            a.common.seed,
            &a.common.out_dir,
            &a.checkpoint,
            !a.path.unmerged,
        ),
        Command::Robustness(a) => commands::robustness(
            &a.common.config,
            a.common.seed,
            &a.common.out_dir,
            &a.checkpoint,
            &a.kinds,
            a.levels.as_deref(),
            a.trials,
            !a.path.unmerged,
        ),
        Command::Ablate(a) => commands::ablate(&a.common.config, a.common.seed, &a.common.out_dir, a.seeds),
        Command::Gradcheck(a) => commands::gradcheck(a.seed, a.trials, a.corrupt_surrogate),
        Command::ExportFeatures(a) => commands::export_features(
            &a.common.config,
            a.common.seed,
            &a.common.out_dir,
            &a.checkpoint,
            a.n_samples,
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
