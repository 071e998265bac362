//! Dense tensors, reverse-mode gradients, MLPs and the AdamW optimizer.

mod adamw;
mod mlp;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use mlp::{Activation, Linear, Mlp};
pub use params::{ParamId, ParamStore};
pub use rng::{derive_seed, Rng, RngState};
pub use tape::{sigmoid, softplus, Gradients, Segments, Tape, Unary, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: dimension mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: input {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: String },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite gradient {value} at index {index} of parameter `{param}`")]
    NonFiniteGradient { param: String, index: usize, value: f64 },
    #[error("contract violation: {0}")]
    Contract(&'static str),
}
