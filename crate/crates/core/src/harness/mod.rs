//! Training, model selection, metrics, cross-validation, grid search and
//! score export.

mod config;
mod cv;
mod export;
mod grid;
mod metrics;
mod train;

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{ExperimentConfig, ModelSection, CONFIG_SCHEMA_VERSION};
pub use cv::{
    population_std, run_plan, run_repeated_cv, summarize, CellRecord, CellStatus, CvResult, CvSummary, MeanStd,
    RESULTS_FORMAT,
};
pub use export::{
    export_instance_scores, instance_scores, read_instance_scores, write_instance_scores, InstanceScore,
    INSTANCE_SCORE_COLUMNS,
};
pub use grid::{grid_search, rank_best, GridCell, GridConfig, GridResult, GridRow, GridSpec, GRID_SCHEMA_VERSION};
pub use metrics::{
    average_precision, bag_accuracy, evaluate_bag_accuracy, evaluate_instance_aucpr, instance_labels, predict_dataset,
    DEFAULT_THRESHOLD,
};
pub use train::{
    dataset_loss, save_epoch_logs, select_epoch, train, train_observed, write_epoch_logs, EpochLog, Stream, TrainConfig, TrainOutcome,
    EPOCH_LOG_COLUMNS,
};

use crate::data::{standardize, DataError, MilDataset, Standardizer};
use crate::model::{Likelihood, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("numeric failure in epoch {epoch} (bags {bags:?}): {source}")]
    Numeric { epoch: usize, bags: Vec<String>, source: ModelError },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl HarnessError {
    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn csv(e: csv::Error) -> Self {
        HarnessError::Format(e.to_string())
    }

    /// True for failures caused by non-finite values during training.
    pub fn is_numeric(&self) -> bool {
        matches!(self, HarnessError::Numeric { .. } | HarnessError::Model(ModelError::NonFinite { .. }))
    }
}

/// Standardizes from training statistics for Gaussian likelihoods; Bernoulli
/// features are left as they are.
pub fn prepare_splits(
    train: &MilDataset,
    others: &[&MilDataset],
    likelihood: Likelihood,
) -> Result<(MilDataset, Vec<MilDataset>, Option<Standardizer>), HarnessError> {
    match likelihood {
        Likelihood::GaussianUnitVariance => {
            let (t, rest, stats) = standardize(train, others)?;
            Ok((t, rest, Some(stats)))
        }
        Likelihood::Bernoulli => Ok((train.clone(), others.iter().map(|d| (*d).clone()).collect(), None)),
    }
}

/// SHA-256 hex digest of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Maps `f` over `items` on a pool of `jobs` threads, keeping input order.
pub(crate) fn run_pool<T: Sync, R: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(&T) -> R + Sync + Send,
) -> Result<Vec<R>, HarnessError> {
    use rayon::prelude::*;
    if jobs <= 1 {
        return Ok(items.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}
