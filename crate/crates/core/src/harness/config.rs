//! Experiment configuration files (TOML).
//!
//! ```toml
//! schema_version = 1
//!
//! [model]
//! hidden_layers = 2
//! hidden_units = 100
//! bag_latent_dim = 16
//! instance_latent_dim = 16
//! alpha = 1000.0
//! likelihood = "gaussian_unit_variance"
//!
//! [train]
//! epochs = 100
//! batch_bags = 8
//! lr = 0.001
//! weight_decay = 0.01
//! seed = 0
//! ```

use serde::{Deserialize, Serialize};

use super::{HarnessError, TrainConfig};
use crate::model::{Likelihood, MivaeConfig, Pooling};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Model settings that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_layers")]
    pub hidden_layers: usize,
    #[serde(default = "d_units")]
    pub hidden_units: usize,
    #[serde(default = "d_latent")]
    pub bag_latent_dim: usize,
    #[serde(default = "d_latent")]
    pub instance_latent_dim: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_likelihood")]
    pub likelihood: Likelihood,
    #[serde(default = "d_pooling")]
    pub pooling: Pooling,
}

fn d_layers() -> usize {
    2
}
fn d_units() -> usize {
    100
}
fn d_latent() -> usize {
    16
}
fn d_alpha() -> f64 {
    1000.0
}
fn d_likelihood() -> Likelihood {
    Likelihood::GaussianUnitVariance
}
fn d_pooling() -> Pooling {
    Pooling::Max
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_layers: d_layers(),
            hidden_units: d_units(),
            bag_latent_dim: d_latent(),
            instance_latent_dim: d_latent(),
            alpha: d_alpha(),
            likelihood: d_likelihood(),
            pooling: d_pooling(),
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, dim: usize) -> Result<MivaeConfig, HarnessError> {
        let c = MivaeConfig {
            dim,
            bag_latent_dim: self.bag_latent_dim,
            instance_latent_dim: self.instance_latent_dim,
            hidden_layers: self.hidden_layers,
            hidden_units: self.hidden_units,
            alpha: self.alpha,
            likelihood: self.likelihood,
            pooling: self.pooling,
        };
        c.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn from_model(c: &MivaeConfig) -> Self {
        Self {
            hidden_layers: c.hidden_layers,
            hidden_units: c.hidden_units,
            bag_latent_dim: c.bag_latent_dim,
            instance_latent_dim: c.instance_latent_dim,
            alpha: c.alpha,
            likelihood: c.likelihood,
            pooling: c.pooling,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn new(model: ModelSection, train: TrainConfig) -> Self {
        Self { schema_version: CONFIG_SCHEMA_VERSION, model, train }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if c.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                c.schema_version
            )));
        }
        c.train.validate()?;
        if c.model.bag_latent_dim == 0 || c.model.instance_latent_dim == 0 {
            return Err(HarnessError::Config("latent dimensions must be positive".into()));
        }
        c.model.resolve(1)?;
        Ok(c)
    }

    /// Every field written out, defaults included.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
