//! The multi-instance variational auto-encoder: parameters, the batched
//! differentiable objective, single-bag operations and checkpoints.

mod checkpoint;
mod config;
pub mod graph;
pub mod ops;
mod params;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT};
pub use config::{Likelihood, MivaeConfig, Pooling};
pub use graph::{build_loss, predict_batch, BagNoise, Batch, BatchPrediction, LossGraph, LOGIT_CLAMP, LOGVAR_MAX, LOGVAR_MIN};
pub use ops::{ElboParts, GaussianPosterior};
pub use params::MivaeParams;

use crate::diff::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("batch has no bags")]
    EmptyBatch,
    #[error("bag {0} has no instances")]
    EmptyBag(String),
    #[error("{what} dimension: expected {expected}, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },
    #[error("noise: {0}")]
    Noise(String),
    #[error("non-finite {term} term")]
    NonFinite { term: &'static str },
    #[error("model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
