//! Command-line driver: configuration, on-disk formats and one subcommand
//! per pipeline stage.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod fieldio;
pub mod models;
pub mod rundir;
pub mod scores;
pub mod verify;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::commands::Context;
use crate::config::{ExperimentConfig, Preset};
use crate::fieldio::FieldIoError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{}", config_message(key, message))]
    Config { key: String, message: String },
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    FieldIo(#[from] FieldIoError),
    #[error(transparent)]
    World(#[from] ddnet_core::synthworld::WorldError),
    #[error(transparent)]
    Net(#[from] ddnet_core::netblocks::NetError),
    #[error(transparent)]
    Tensor(#[from] ddnet_core::tensor::TensorError),
    #[error(transparent)]
    Forecast(#[from] ddnet_core::forecaster::ForecastError),
    #[error(transparent)]
    Assim(#[from] ddnet_core::assimilator::AssimError),
    #[error(transparent)]
    Ops(#[from] ddnet_core::opsloop::OpsError),
    #[error(transparent)]
    Eval(#[from] ddnet_core::evalkit::EvalError),
}

fn config_message(key: &str, message: &str) -> String {
    if key.is_empty() {
        format!("config: {message}")
    } else {
        format!("config key `{key}`: {message}")
    }
}

impl CliError {
    /// 1 for bad input (flags, config, stale artifacts), 2 for failures
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Config { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ddnet", version, about = "Forecast and learned-assimilation pipeline on a synthetic aerosol world")]
pub struct Cli {
    /// Experiment config (TOML). Required.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base directory for every artifact path (default: the config's directory).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the world, training and sampling seeds.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Network size preset.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the prediction network on [t0, t1).
    TrainPrednet,
    /// Mean AOD RMSE against lead time from random start times.
    EvalRollout,
    /// Build DA training pairs on [t1, t2).
    BuildDaSet,
    /// Train the assimilation network on the DA pairs.
    TrainDanet,
    /// Forecast/assimilate cycle over the operational segment.
    RunOperational,
    /// Uninterrupted forecast over the operational segment.
    RunBaseline,
    /// Score the latest operational run against the latest baseline.
    Evaluate,
    /// Write CSV tables and SVG charts for the latest runs.
    Report,
    /// Parameter-count and gradient self-checks.
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainPrednet => "train-prednet",
            Command::EvalRollout => "eval-rollout",
            Command::BuildDaSet => "build-da-set",
            Command::TrainDanet => "train-danet",
            Command::RunOperational => "run-operational",
            Command::RunBaseline => "run-baseline",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
            Command::Verify => "verify",
        }
    }
}

fn context(cli: &Cli) -> Result<Context, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Validation("missing required flag --config PATH".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(p) = cli.preset {
        cfg.network.preset = p;
    }
    cfg.validate()?;
    let base = match &cli.out {
        Some(dir) => dir.clone(),
        None => path.parent().map(PathBuf::from).unwrap_or_default(),
    };
    Ok(Context { cfg, base })
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("DDNET_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("DDNET_THREADS must be a positive integer, got {v:?}")))?;
    // A pool already built by an earlier call in this process is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<String, CliError> {
    configure_threads()?;
    let ctx = context(cli)?;
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::TrainPrednet => commands::train_prednet_cmd(&ctx),
        Command::EvalRollout => commands::eval_rollout(&ctx),
        Command::BuildDaSet => commands::build_da_set(&ctx),
        Command::TrainDanet => commands::train_danet_cmd(&ctx),
        Command::RunOperational => commands::run_operational_cmd(&ctx),
        Command::RunBaseline => commands::run_baseline_cmd(&ctx),
        Command::Evaluate => commands::evaluate(&ctx),
        Command::Report => commands::report(&ctx),
        Command::Verify => commands::verify(&ctx),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            let _ = writeln!(out, "{}: {summary}", cli.command.name());
            0
        }
        Err(e) => {
            let _ = writeln!(err, "{}: error: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
