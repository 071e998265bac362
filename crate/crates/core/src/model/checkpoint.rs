//! Self-describing JSON checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MivaeConfig, MivaeParams, ModelError};
use crate::data::Standardizer;
use crate::diff::{AdamWState, Rng, RngState, Tensor};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: MivaeConfig,
    /// Feature statistics the parameters were trained against.
    pub standardizer: Option<Standardizer>,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<AdamWState>,
    pub rng: Option<RngState>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: &MivaeParams) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT,
            config: params.config.clone(),
            standardizer: None,
            params: params
                .store
                .iter()
                .map(|(_, name, t)| NamedTensor { name: name.to_string(), tensor: t.clone() })
                .collect(),
            optimizer: None,
            rng: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_optimizer(mut self, state: &AdamWState) -> Self {
        self.optimizer = Some(state.clone());
        self
    }

    pub fn with_rng(mut self, rng: &Rng) -> Self {
        self.rng = Some(rng.state());
        self
    }

    pub fn with_standardizer(mut self, s: &Standardizer) -> Self {
        self.standardizer = Some(s.clone());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_FORMAT})",
                ck.format_version
            )));
        }
        ck.config.validate()?;
        if let Some(s) = &ck.standardizer {
            if s.dim() != ck.config.dim {
                return Err(ModelError::Checkpoint(format!(
                    "standardizer has dimension {}, model has {}",
                    s.dim(),
                    ck.config.dim
                )));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Rebuilds parameters. Fails if the stored tensors do not fit the stored config.
    pub fn params(&self) -> Result<MivaeParams, ModelError> {
        let mut p = MivaeParams::init(&self.config, &mut Rng::from_seed(0))?;
        p.load_values(self.params.iter().map(|n| (n.name.as_str(), &n.tensor)))?;
        if let Some(opt) = &self.optimizer {
            if !opt.matches(&p.store) {
                return Err(ModelError::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        Ok(p)
    }

    /// Rejects a checkpoint whose feature or latent dimensions differ from `expected`.
    pub fn check_dims(&self, expected: &MivaeConfig) -> Result<(), ModelError> {
        let c = &self.config;
        let pairs = [
            ("feature", expected.dim, c.dim),
            ("bag latent", expected.bag_latent_dim, c.bag_latent_dim),
            ("instance latent", expected.instance_latent_dim, c.instance_latent_dim),
        ];
        for (what, e, f) in pairs {
            if e != f {
                return Err(ModelError::Dimension { what, expected: e, found: f });
            }
        }
        Ok(())
    }

    pub fn check_data_dim(&self, dim: usize) -> Result<(), ModelError> {
        if dim != self.config.dim {
            return Err(ModelError::Dimension { what: "feature", expected: self.config.dim, found: dim });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::AdamWConfig;

    fn params() -> MivaeParams {
        let c = MivaeConfig { hidden_layers: 1, hidden_units: 4, ..MivaeConfig::new(3, 2) };
        MivaeParams::init(&c, &mut Rng::from_seed(1)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = params();
        let opt = AdamWState::new(AdamWConfig::default(), &p.store);
        let rng = Rng::from_seed(5);
        let ck = Checkpoint::new(&p).with_optimizer(&opt).with_rng(&rng);
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), p);
    }

    #[test]
    fn rejects_other_dims() {
        let p = params();
        let ck = Checkpoint::new(&p);
        let other = MivaeConfig { dim: 4, ..p.config.clone() };
        assert!(matches!(ck.check_dims(&other), Err(ModelError::Dimension { expected: 4, found: 3, .. })));
        let other = MivaeConfig { bag_latent_dim: 3, ..p.config.clone() };
        assert!(ck.check_dims(&other).is_err());
        assert!(ck.check_dims(&p.config).is_ok());
        assert!(ck.check_data_dim(5).is_err());
    }

    #[test]
    fn rejects_tampered_tensors() {
        let p = params();
        let mut ck = Checkpoint::new(&p);
        ck.config.instance_latent_dim = 3;
        assert!(Checkpoint::from_json(&ck.to_json()).unwrap().params().is_err());
        let mut ck = Checkpoint::new(&p);
        ck.params.pop();
        assert!(ck.params().is_err());
        let mut ck = Checkpoint::new(&p);
        ck.format_version = 99;
        assert!(Checkpoint::from_json(&ck.to_json()).is_err());
        assert!(Checkpoint::from_json("{").is_err());
    }
}
