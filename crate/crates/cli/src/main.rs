//! `traverse`: runs the traversability pipeline stage by stage inside a run
//! directory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use config::Config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("`{command}` needs the output of `{required}` first (missing {missing})")]
    Stage { command: &'static str, required: &'static str, missing: PathBuf },
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

fn defaults_help() -> String {
    format!(
        "Exit codes: 0 ok, 2 configuration error, 3 stage-order error, 4 runtime failure.\n\n\
         Stage order: synth|ingest → annotate → train-gan → train-invgen → train-head --kind single \
         → reannotate → train-head --kind temporal|stereo. Stereo models need train-gan --stereo and \
         train-invgen --stereo.\n\n\
         Configuration defaults (TOML, every key optional):\n\n{}",
        Config::default().to_toml()
    )
}

#[derive(Debug, Parser)]
#[command(name = "traverse", version, about = "Semi-supervised traversability estimation", after_long_help = defaults_help())]
struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `run.dir`.
    #[arg(long, global = true, env = "TRAVERSE_RUN_DIR")]
    run_dir: Option<PathBuf>,
    /// Run seed; overrides `run.seed`.
    #[arg(long, global = true, env = "TRAVERSE_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadChoice {
    Single,
    Temporal,
    Stereo,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into `<run>/data` and register it.
    Synth,
    /// Validate an existing dataset directory and register it.
    Ingest {
        /// Dataset root (manifest.json, labels.csv, sessions).
        source: PathBuf,
    },
    /// Write velocity-based positives next to the hand labels in `<run>/labels.csv`.
    Annotate,
    /// Stage 1: adversarial training on the automatic positives.
    TrainGan {
        /// Six-channel stereo networks.
        #[arg(long)]
        stereo: bool,
    },
    /// Stage 2: inverse generator with the GAN frozen.
    TrainInvgen {
        #[arg(long)]
        stereo: bool,
    },
    /// Stage 3: classification head with feature extraction frozen.
    TrainHead {
        #[arg(long, value_enum, default_value_t = HeadChoice::Single)]
        kind: HeadChoice,
    },
    /// Soft-label static frames with the single-frame model, retrain it and report drift.
    Reannotate,
    /// Test-set metrics for every trained model, data efficiency and saliency.
    Eval,
    /// Throughput and memory of every trained model, and the inversion speed ratio.
    Bench,
    /// Prediction traces over scripted scenarios and test sequences.
    Trace,
    /// Stream a recorded session through a model with the emergency stop.
    Stream {
        #[arg(long, value_enum, default_value_t = HeadChoice::Single)]
        model: HeadChoice,
        /// `env/session` to replay; defaults to the first test sequence.
        #[arg(long)]
        session: Option<String>,
        /// Rate at which the source produces frames; 0 for as fast as possible.
        #[arg(long, default_value_t = 3.0)]
        source_hz: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(d) = cli.run_dir {
        cfg.run.dir = d;
    }
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    let ctx = commands::Context::open(cfg)?;
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Ingest { source } => commands::ingest(&ctx, &source),
        Command::Annotate => commands::annotate(&ctx),
        Command::TrainGan { stereo } => commands::train_gan(&ctx, stereo),
        Command::TrainInvgen { stereo } => commands::train_invgen(&ctx, stereo),
        Command::TrainHead { kind } => commands::train_head(&ctx, kind),
        Command::Reannotate => commands::reannotate(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Bench => commands::bench(&ctx),
        Command::Trace => commands::trace(&ctx),
        Command::Stream { model, session, source_hz } => commands::stream(&ctx, model, session.as_deref(), source_hz),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
