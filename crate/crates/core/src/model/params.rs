use serde::{Deserialize, Serialize};

use super::{MivaeConfig, ModelError};
use crate::diff::{Mlp, ParamStore, Rng, Tensor};

/// All trainable networks of the model, backed by one parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MivaeParams {
    pub config: MivaeConfig,
    pub store: ParamStore,
    /// `x -> (mean, logvar)` of the instance factor.
    pub instance_encoder: Mlp,
    /// `x -> (mean, logvar)` of the intermediate bag factor.
    pub bag_encoder: Mlp,
    /// `(z_B, z_I) -> x` means or logits.
    pub decoder: Mlp,
    /// `y -> ` prior mean of `z_B`.
    pub prior_net: Mlp,
    /// `z_I -> ` instance logit.
    pub instance_head: Mlp,
    /// `z_B -> ` bag logit.
    pub bag_head: Mlp,
    /// `(bag logit, pooled instance logit) -> ` final logit.
    pub combiner: Mlp,
}

impl MivaeParams {
    pub fn init(config: &MivaeConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::new();
        let instance_encoder = Mlp::new(&mut store, "instance_encoder", &c.widths(c.dim, 2 * c.instance_latent_dim), rng);
        let bag_encoder = Mlp::new(&mut store, "bag_encoder", &c.widths(c.dim, 2 * c.bag_latent_dim), rng);
        let decoder =
            Mlp::new(&mut store, "decoder", &c.widths(c.bag_latent_dim + c.instance_latent_dim, c.dim), rng);
        let prior_net = Mlp::new(&mut store, "prior_net", &c.widths(1, c.bag_latent_dim), rng);
        let instance_head = Mlp::new(&mut store, "instance_head", &c.widths(c.instance_latent_dim, 1), rng);
        let bag_head = Mlp::new(&mut store, "bag_head", &c.widths(c.bag_latent_dim, 1), rng);
        // starts as the sum of both logits so the bag probability increases with each pathway
        let combiner = Mlp::from_weights(
            &mut store,
            "combiner",
            vec![(Tensor::filled(&[2, 1], 1.0), Tensor::zeros(&[1, 1]))],
        )?;
        Ok(Self { config: c.clone(), store, instance_encoder, bag_encoder, decoder, prior_net, instance_head, bag_head, combiner })
    }

    pub fn networks(&self) -> [&Mlp; 7] {
        [
            &self.instance_encoder,
            &self.bag_encoder,
            &self.decoder,
            &self.prior_net,
            &self.instance_head,
            &self.bag_head,
            &self.combiner,
        ]
    }

    /// Sets every weight and bias to zero.
    pub fn zeroed(mut self) -> Self {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            self.store.get_mut(id).values_mut().fill(0.0);
        }
        self
    }

    /// Replaces parameter values by name; every name must exist with the same shape.
    pub fn load_values<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<(), ModelError> {
        let mut seen = vec![false; self.store.len()];
        for (name, t) in named {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected parameter {name}")))?;
            if self.store.get(id).shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    self.store.get(id).shape(),
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(ModelError::Checkpoint(format!("parameter {name} has non-finite values")));
            }
            *self.store.get_mut(id) = t.clone();
            seen[id.index()] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let id = self.store.ids().nth(missing).expect("index in range");
            return Err(ModelError::Checkpoint(format!("missing parameter {}", self.store.name(id))));
        }
        Ok(())
    }
}
