//! Command-line driver: `synth`, `train`, `cv`, `gridsearch`, `predict` and
//! `replay`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 data error,
//! 4 numeric failure, 5 replay mismatch.

pub mod commands;
mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::CliError;
pub use manifest::{Invocation, RunManifest, MANIFEST_FORMAT};

#[derive(Debug, Parser)]
#[command(name = "mivae", version, about = "Multi-instance variational auto-encoder experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic bag dataset with instance labels.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "MIVAE_OUT")]
        out: PathBuf,
    },
    /// Train one model with a 10% validation split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "MIVAE_OUT")]
        out: PathBuf,
    },
    /// Repeated stratified K-fold cross-validation.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, env = "MIVAE_OUT")]
        out: PathBuf,
        #[arg(long, env = "MIVAE_JOBS", default_value_t = 1)]
        jobs: usize,
    },
    /// Train every cell of a hyperparameter grid and rank by validation loss.
    Gridsearch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, env = "MIVAE_OUT")]
        out: PathBuf,
        #[arg(long, env = "MIVAE_JOBS", default_value_t = 1)]
        jobs: usize,
    },
    /// Bag probabilities and instance scores from a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "MIVAE_OUT")]
        out: PathBuf,
    },
    /// Re-run a manifest into a new output location.
    Replay {
        manifest: PathBuf,
        #[arg(long, env = "MIVAE_OUT")]
        out: PathBuf,
        /// Fail unless the reproducible outputs match the original run byte for byte.
        #[arg(long)]
        check: bool,
    },
}

/// Resolves a command into a manifest (reading its config file) without running it.
pub fn resolve(command: &Command) -> Result<Option<RunManifest>, CliError> {
    use commands::{absolute, load_config, load_grid, load_spec};
    let m = match command {
        Command::Synth { spec, seed, out } => RunManifest::new(
            Invocation::Synth { spec: load_spec(spec)?, seed: *seed, out: absolute(out) },
            Some(absolute(spec)),
        ),
        Command::Train { data, config, out } => RunManifest::new(
            Invocation::Train { data: absolute(data), config: load_config(config)?, out: absolute(out) },
            Some(absolute(config)),
        ),
        Command::Cv { data, config, repeats, folds, out, jobs } => RunManifest::new(
            Invocation::Cv {
                data: absolute(data),
                config: load_config(config)?,
                repeats: *repeats,
                folds: *folds,
                jobs: *jobs,
                out: absolute(out),
            },
            Some(absolute(config)),
        ),
        Command::Gridsearch { data, grid, out, jobs } => RunManifest::new(
            Invocation::Gridsearch { data: absolute(data), grid: load_grid(grid)?, jobs: *jobs, out: absolute(out) },
            Some(absolute(grid)),
        ),
        Command::Predict { checkpoint, data, out } => RunManifest::new(
            Invocation::Predict { checkpoint: absolute(checkpoint), data: absolute(data), out: absolute(out) },
            None,
        ),
        Command::Replay { .. } => return Ok(None),
    };
    Ok(Some(m))
}

/// Runs a parsed command line; returns the summary for standard output.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Replay { manifest, out, check } => commands::replay(manifest, out, *check),
        other => {
            let manifest = resolve(other)?.expect("not a replay");
            commands::execute(&manifest)
        }
    }
}
