use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::DiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

/// Affine layer `x * W + b`, with `W` stored as `in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Stack of affine layers with an activation between consecutive layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    name: String,
    dims: Vec<usize>,
    layers: Vec<Linear>,
}

impl Mlp {
    /// Registers a fresh network with layer widths `dims` (input first).
    /// Weights are Glorot-uniform, biases zero.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let values = (0..fan_in * fan_out).map(|_| rng.uniform(-limit, limit)).collect();
                let weight = store.register(
                    format!("{name}.{i}.weight"),
                    Tensor::from_parts_unchecked(vec![fan_in, fan_out], values),
                );
                let bias = store.register(format!("{name}.{i}.bias"), Tensor::zeros(&[1, fan_out]));
                Linear { weight, bias }
            })
            .collect();
        Self { name: name.to_string(), dims: dims.to_vec(), layers }
    }

    /// Registers a network from explicit `(weight, bias)` pairs.
    pub fn from_weights(store: &mut ParamStore, name: &str, weights: Vec<(Tensor, Tensor)>) -> Result<Self, DiffError> {
        if weights.is_empty() {
            return Err(DiffError::Shape { op: "mlp", detail: "no layers".into() });
        }
        let mut dims = Vec::with_capacity(weights.len() + 1);
        for (i, (w, b)) in weights.iter().enumerate() {
            let ws = w.shape();
            if ws.len() != 2 || b.shape() != [1, ws[1]] {
                return Err(DiffError::Shape {
                    op: "mlp",
                    detail: format!("layer {i}: weight {ws:?} with bias {:?}", b.shape()),
                });
            }
            if let Some(&prev) = dims.last() {
                if prev != ws[0] {
                    return Err(DiffError::Shape {
                        op: "mlp",
                        detail: format!("layer {i} expects {} inputs but previous layer yields {prev}", ws[0]),
                    });
                }
            } else {
                dims.push(ws[0]);
            }
            dims.push(ws[1]);
        }
        let layers = weights
            .into_iter()
            .enumerate()
            .map(|(i, (w, b))| Linear {
                weight: store.register(format!("{name}.{i}.weight"), w),
                bias: store.register(format!("{name}.{i}.bias"), b),
            })
            .collect();
        Ok(Self { name: name.to_string(), dims, layers })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    /// Affine/activation stack; the last layer is affine followed by `output`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        hidden: Activation,
        output: Activation,
    ) -> Result<Var, DiffError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(store, layer.weight);
            let b = tape.param(store, layer.bias);
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = activate(tape, z, if i == last { output } else { hidden })?;
            if !tape.value(h).all_finite() {
                return Err(DiffError::NonFinite { layer: format!("{}.{i}", self.name) });
            }
        }
        Ok(h)
    }
}

fn activate(tape: &mut Tape, z: Var, a: Activation) -> Result<Var, DiffError> {
    match a {
        Activation::Identity => Ok(z),
        Activation::Relu => tape.relu(z),
        Activation::Sigmoid => tape.sigmoid(z),
    }
}
