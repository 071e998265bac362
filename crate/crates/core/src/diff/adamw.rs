//! AdamW with decoupled weight decay.
//!
//! Per parameter `p` with gradient `g` at step `t`:
//!
//! ```text
//! p <- p - lr * wd * p
//! m <- b1 * m + (1 - b1) * g
//! v <- b2 * v + (1 - b2) * g^2
//! p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Gradients;
use super::tensor::Tensor;
use super::DiffError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, first_moment: zeros(), second_moment: zeros() }
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// Checks that the moment buffers line up with `params`.
    pub fn matches(&self, params: &ParamStore) -> bool {
        self.first_moment.len() == params.len()
            && self.second_moment.len() == params.len()
            && params.iter().all(|(id, _, t)| {
                self.first_moment[id.index()].shape() == t.shape()
                    && self.second_moment[id.index()].shape() == t.shape()
            })
    }

    /// One update. Parameters without a gradient still receive weight decay.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), DiffError> {
        for (id, g) in grads.params() {
            if g.shape() != params.get(id).shape() {
                return Err(DiffError::Shape {
                    op: "adamw_step",
                    detail: format!("gradient {:?} for parameter {} {:?}", g.shape(), params.name(id), params.get(id).shape()),
                });
            }
            if let Some((i, v)) = g.values().iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(DiffError::NonFiniteGradient { param: params.name(id).to_string(), index: i, value: *v });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let grad = grads.param(id);
            let p = params.get_mut(id).values_mut();
            let m = self.first_moment[id.index()].values_mut();
            let v = self.second_moment[id.index()].values_mut();
            for i in 0..p.len() {
                p[i] -= c.lr * c.weight_decay * p[i];
                let g = grad.map_or(0.0, |g| g.values()[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;

    fn scalar_problem(p: f64, g: f64, config: AdamWConfig) -> (ParamStore, AdamWState, Gradients) {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::scalar(p));
        let state = AdamWState::new(config, &store);
        // d/dp (g * p) = g
        let mut tape = Tape::new();
        let v = tape.param(&store, id);
        let loss = tape.scale(v, g);
        let grads = tape.backward(loss).unwrap();
        (store, state, grads)
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let (mut store, mut state, grads) = scalar_problem(0.37, 0.0, cfg);
        for _ in 0..5 {
            state.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.get(crate::diff::ParamId(0)).item(), 0.37);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected m_hat = 1, v_hat = 1: p = 1 - 0.1 * 1 / (1 + 1e-8)
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let (mut store, mut state, grads) = scalar_problem(1.0, 1.0, cfg);
        state.step(&mut store, &grads).unwrap();
        let p = store.get(crate::diff::ParamId(0)).item();
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_only() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.01, ..AdamWConfig::default() };
        let (mut store, mut state, grads) = scalar_problem(1.0, 0.0, cfg);
        state.step(&mut store, &grads).unwrap();
        assert!((store.get(crate::diff::ParamId(0)).item() - 0.999).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut store, mut state, grads) = scalar_problem(1.0, f64::NAN, AdamWConfig::default());
        let err = state.step(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        assert_eq!(state.step, 0);
        assert_eq!(store.get(crate::diff::ParamId(0)).item(), 1.0);
    }
}
