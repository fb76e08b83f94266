//! `fcdd` command-line front end: loads a TOML run configuration, applies
//! flag overrides and runs one pipeline stage per subcommand.
//!
//! Exit codes: 0 on success, 2 for bad flags, configuration, data or I/O
//! problems, 3 when training diverges.

pub mod commands;
pub mod config;
pub mod sidecar;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// A problem attributable to one flag (or the config key it overrides).
    #[error("{flag}: {message}")]
    Flag { flag: &'static str, message: String },

    #[error(transparent)]
    Core(#[from] fcdd_core::Error),
}

impl CliError {
    pub fn flag(flag: &'static str, message: impl Into<String>) -> Self {
        CliError::Flag {
            flag,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(fcdd_core::Error::Divergence { .. }) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fcdd", version, about = "One-class anomaly detection on imbalanced image data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic dataset to `<out>/dataset`.
    Synth,
    /// Train a detector at `train.ratio` and save a checkpoint.
    Train,
    /// Score the test split: scores, metrics, histogram and heatmaps.
    Score {
        /// Checkpoint directory; defaults to `<out>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep the positive-ratio ladder and locate 1/a*.
    Ablate,
    /// Train the contrastive encoder and export embeddings.
    Embed,
    /// Reduce embeddings to 2-D and cluster them.
    Cluster {
        /// Embedding CSV; defaults to `<out>/embeddings.csv`.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Summarize an ablation report (and cluster count, if present).
    Report,
}

/// Flags that override keys of the configuration file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random draw in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dataset folder, replacing the synthetic dataset.
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Comma-separated rungs, e.g. `1/1,1/8,one-shot`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub rungs: Option<Vec<String>>,
    /// AUC tolerance when locating 1/a*.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    /// Heatmap Gaussian width in pixels; defaults to half the field stride.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    /// DBSCAN radius in the 2-D map.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub eps: Option<f64>,
    /// DBSCAN core threshold, counting the point itself.
    #[arg(long, global = true)]
    pub min_neighbors: Option<usize>,
    /// Contrastive temperature.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Weight of the positive term in the MN-pair loss.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub pi: Option<f64>,
    /// Parallel ablation jobs; defaults to the available cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Training epochs for `train`, `ablate` and `embed`.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, mut config: RunConfig) -> RunConfig {
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = &self.out {
            config.out = v.clone();
        }
        if let Some(v) = &self.data {
            config.dataset.folder = Some(v.clone());
        }
        if let Some(v) = &self.rungs {
            config.ablation.rungs = v.iter().map(|r| r.trim().to_string()).collect();
        }
        if let Some(v) = self.delta {
            config.ablation.delta = v;
        }
        if let Some(v) = self.sigma {
            config.heatmap.sigma = Some(v);
        }
        if let Some(v) = self.eps {
            config.cluster.eps = v;
        }
        if let Some(v) = self.min_neighbors {
            config.cluster.min_neighbors = v;
        }
        if let Some(v) = self.tau {
            config.contrastive.tau = v;
        }
        if let Some(v) = self.pi {
            config.contrastive.pi = v;
        }
        if let Some(v) = self.workers {
            config.ablation.workers = Some(v);
        }
        if let Some(v) = self.epochs {
            config.train.epochs = v;
            config.contrastive.epochs = v;
        }
        config
    }
}

/// Resolves the configuration and runs the chosen subcommand.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let base = match &cli.overrides.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let config = cli.overrides.apply(base);
    config.validate()?;
    match &cli.command {
        Command::Synth => commands::synth(&config),
        Command::Train => commands::train(&config),
        Command::Score { checkpoint } => commands::score(&config, checkpoint.as_deref()),
        Command::Ablate => commands::ablate(&config),
        Command::Embed => commands::embed(&config),
        Command::Cluster { embeddings } => commands::cluster(&config, embeddings.as_deref()),
        Command::Report => commands::report(&config),
    }
}

/// Parses `args`, runs, prints any error to stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
