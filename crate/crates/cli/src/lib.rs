//! Command-line front end for constellation shaping experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod export;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Diverged(#[from] cshape::trainer::Diverged),
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("gradient check failed: {0}")]
    GradientCheck(String),
    #[error(transparent)]
    Runtime(#[from] cshape::Error),
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Io { .. } => 4,
            CliError::GradientCheck(_) | CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cshape", version, about = "End-to-end constellation shaping with blind phase search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for sweeps and comparisons.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint and history.
    Train(CommonArgs),
    /// Evaluate a checkpoint over a grid of channel points.
    Sweep(CommonArgs),
    /// Write the constellation of a checkpoint.
    ExportConstellation(CommonArgs),
    /// Write demapper decision-region grids.
    Regions(CommonArgs),
    /// Fit Maxwell-Boltzmann distributions to learned probabilities.
    FitMb(CommonArgs),
    /// Compare regular and trainable soft BPS over seeds.
    CompareBps(CommonArgs),
    /// Verify analytic gradients against finite differences.
    CheckGradients(CommonArgs),
}

/// Resolved inputs shared by all commands.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub threads: usize,
}

impl Context {
    pub fn from_args(args: &CommonArgs) -> Result<Self, CliError> {
        let mut config = match &args.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        Ok(Self {
            config,
            out: args.out.clone(),
            threads: args.threads.max(1),
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.config
            .eval
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoint.json"))
    }
}

type Handler = fn(&Context) -> Result<(), CliError>;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let (args, f): (&CommonArgs, Handler) = match &cli.command {
        Command::Train(a) => (a, commands::cmd_train),
        Command::Sweep(a) => (a, commands::cmd_sweep),
        Command::ExportConstellation(a) => (a, commands::cmd_export_constellation),
        Command::Regions(a) => (a, commands::cmd_regions),
        Command::FitMb(a) => (a, commands::cmd_fit_mb),
        Command::CompareBps(a) => (a, commands::cmd_compare_bps),
        Command::CheckGradients(a) => (a, commands::cmd_check_gradients),
    };
    let ctx = Context::from_args(args)?;
    std::fs::create_dir_all(&ctx.out).map_err(|e| CliError::io(&ctx.out, e))?;
    f(&ctx)
}
