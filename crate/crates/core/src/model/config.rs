use serde::{Deserialize, Serialize};

use super::ModelError;

/// Per-feature observation model of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Decoder outputs means; unit variance.
    GaussianUnitVariance,
    /// Decoder outputs logits; features in `[0, 1]`.
    Bernoulli,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
}

/// Architecture and objective weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MivaeConfig {
    /// Feature dimension `d`.
    pub dim: usize,
    pub bag_latent_dim: usize,
    pub instance_latent_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    /// Weight of the auxiliary classifier term.
    pub alpha: f64,
    #[serde(default = "default_likelihood")]
    pub likelihood: Likelihood,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
}

fn default_likelihood() -> Likelihood {
    Likelihood::GaussianUnitVariance
}

fn default_pooling() -> Pooling {
    Pooling::Max
}

impl MivaeConfig {
    pub fn new(dim: usize, latent_dim: usize) -> Self {
        Self {
            dim,
            bag_latent_dim: latent_dim,
            instance_latent_dim: latent_dim,
            hidden_layers: 2,
            hidden_units: 100,
            alpha: 1000.0,
            likelihood: Likelihood::GaussianUnitVariance,
            pooling: Pooling::Max,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.bag_latent_dim == 0 || self.instance_latent_dim == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.hidden_layers > 0 && self.hidden_units == 0 {
            return Err(ModelError::Config("hidden_units must be positive".into()));
        }
        if self.hidden_layers > 16 || self.hidden_units > 1 << 16 || self.dim > 1 << 20 {
            return Err(ModelError::Config("network too large".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Layer widths `in, hidden..., out` for a sub-network.
    pub(crate) fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat(self.hidden_units).take(self.hidden_layers));
        w.push(output);
        w
    }
}
