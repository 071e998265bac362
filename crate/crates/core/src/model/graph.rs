//! Differentiable forward pass over a batch of bags.
//!
//! Instances of all bags are stacked into one `N x d` matrix; per-bag
//! reductions (posterior aggregation, max pooling, per-bag sums) use row
//! segments, so no bag is padded and every bag-level quantity depends on its
//! instances only through order-free reductions.

use std::sync::Arc;

use super::{MivaeParams, ModelError};
use crate::data::Bag;
use crate::diff::{Activation, Rng, Segments, Tape, Tensor, Var};
use crate::model::Likelihood;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const LOGIT_CLAMP: f64 = 15.0;

/// Standard-normal draws for one bag: one `z_B` draw and one `z_I` draw per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct BagNoise {
    pub bag: Vec<f64>,
    pub instances: Vec<Vec<f64>>,
}

impl BagNoise {
    pub fn draw(bag_dim: usize, instance_dim: usize, n: usize, rng: &mut Rng) -> Self {
        let bag = rng.normals(bag_dim);
        let instances = (0..n).map(|_| rng.normals(instance_dim)).collect();
        Self { bag, instances }
    }

    pub fn zeros(bag_dim: usize, instance_dim: usize, n: usize) -> Self {
        Self { bag: vec![0.0; bag_dim], instances: vec![vec![0.0; instance_dim]; n] }
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self { bag: self.bag.clone(), instances: order.iter().map(|&i| self.instances[i].clone()).collect() }
    }
}

/// Stacked instances and labels for a set of bags.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub segments: Arc<Segments>,
    pub labels: Tensor,
}

impl Batch {
    pub fn new(bags: &[&Bag], dim: usize) -> Result<Self, ModelError> {
        if bags.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut values = Vec::new();
        let mut lengths = Vec::with_capacity(bags.len());
        for bag in bags {
            if bag.is_empty() {
                return Err(ModelError::EmptyBag(bag.id.clone()));
            }
            if bag.dim() != dim {
                return Err(ModelError::Dimension { what: "feature", expected: dim, found: bag.dim() });
            }
            lengths.push(bag.len());
            for x in &bag.instances {
                values.extend_from_slice(x);
            }
        }
        let segments = Arc::new(Segments::from_lengths(&lengths)?);
        let x = Tensor::matrix(segments.total_rows(), dim, values)?;
        let labels = Tensor::matrix(bags.len(), 1, bags.iter().map(|b| b.label_f64()).collect())?;
        Ok(Self { x, segments, labels })
    }

    pub fn num_bags(&self) -> usize {
        self.segments.len()
    }
}

pub(crate) struct Encoded {
    pub instance_mean: Var,
    pub instance_logvar: Var,
    pub bag_mean: Var,
    pub bag_logvar: Var,
}

fn gaussian_head(tape: &mut Tape, h: Var, latent: usize) -> Result<(Var, Var), ModelError> {
    let mean = tape.slice_cols(h, 0, latent)?;
    let raw = tape.slice_cols(h, latent, 2 * latent)?;
    let logvar = tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
    Ok((mean, logvar))
}

/// Instance posteriors and the aggregated bag posterior (mean of means, mean of variances).
pub(crate) fn encode(tape: &mut Tape, params: &MivaeParams, x: Var, segs: &Arc<Segments>) -> Result<Encoded, ModelError> {
    let c = &params.config;
    let hi = params.instance_encoder.forward(tape, &params.store, x, Activation::Relu, Activation::Identity)?;
    let (instance_mean, instance_logvar) = gaussian_head(tape, hi, c.instance_latent_dim)?;
    let hb = params.bag_encoder.forward(tape, &params.store, x, Activation::Relu, Activation::Identity)?;
    let (inter_mean, inter_logvar) = gaussian_head(tape, hb, c.bag_latent_dim)?;
    let (bag_mean, bag_logvar) = aggregate(tape, inter_mean, inter_logvar, segs)?;
    Ok(Encoded { instance_mean, instance_logvar, bag_mean, bag_logvar })
}

pub(crate) fn aggregate(
    tape: &mut Tape,
    mean: Var,
    logvar: Var,
    segs: &Arc<Segments>,
) -> Result<(Var, Var), ModelError> {
    let bag_mean = tape.segment_mean(mean, segs)?;
    let var = tape.exp(logvar)?;
    let bag_var = tape.segment_mean(var, segs)?;
    let bag_logvar = tape.log(bag_var)?;
    Ok((bag_mean, bag_logvar))
}

/// `mean + exp(logvar / 2) * eps`.
pub(crate) fn reparameterize(tape: &mut Tape, mean: Var, logvar: Var, eps: Var) -> Result<Var, ModelError> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half)?;
    let scaled = tape.mul(std, eps)?;
    Ok(tape.add(mean, scaled)?)
}

/// Row-wise KL divergence to `N(prior_mean, 1)` (zero mean when `None`): `rows x 1`.
pub(crate) fn kl_rows(tape: &mut Tape, mean: Var, logvar: Var, prior_mean: Option<Var>) -> Result<Var, ModelError> {
    let var = tape.exp(logvar)?;
    let diff = match prior_mean {
        Some(m) => tape.sub(mean, m)?,
        None => mean,
    };
    let sq = tape.mul(diff, diff)?;
    let t = tape.add(var, sq)?;
    let t = tape.sub(t, logvar)?;
    let t = tape.add_scalar(t, -1.0);
    let t = tape.scale(t, 0.5);
    Ok(tape.sum_cols(t)?)
}

/// Row-wise log-likelihood of `x` under the decoder output: `rows x 1`.
pub(crate) fn log_likelihood_rows(tape: &mut Tape, likelihood: Likelihood, x: Var, out: Var) -> Result<Var, ModelError> {
    match likelihood {
        Likelihood::GaussianUnitVariance => {
            let d = tape.value(x).cols() as f64;
            let diff = tape.sub(x, out)?;
            let sq = tape.mul(diff, diff)?;
            let s = tape.sum_cols(sq)?;
            let s = tape.scale(s, -0.5);
            Ok(tape.add_scalar(s, -0.5 * d * (2.0 * std::f64::consts::PI).ln()))
        }
        Likelihood::Bernoulli => {
            let xl = tape.mul(x, out)?;
            let sp = tape.softplus(out)?;
            let t = tape.sub(xl, sp)?;
            Ok(tape.sum_cols(t)?)
        }
    }
}

/// Unclamped instance logits `f_omega_I` before the sigmoid: `N x 1`.
pub(crate) fn instance_logits(tape: &mut Tape, params: &MivaeParams, z_i: Var) -> Result<Var, ModelError> {
    Ok(params.instance_head.forward(tape, &params.store, z_i, Activation::Relu, Activation::Identity)?)
}

/// Final bag logit from `z_B` and the pooled instance logit, clamped to `+-LOGIT_CLAMP`.
pub(crate) fn bag_logit(tape: &mut Tape, params: &MivaeParams, z_b: Var, pooled: Var) -> Result<Var, ModelError> {
    let s = params.bag_head.forward(tape, &params.store, z_b, Activation::Relu, Activation::Identity)?;
    let s = tape.clamp(s, -LOGIT_CLAMP, LOGIT_CLAMP);
    let pooled = tape.clamp(pooled, -LOGIT_CLAMP, LOGIT_CLAMP);
    let both = tape.concat_cols(s, pooled)?;
    let out = params.combiner.forward(tape, &params.store, both, Activation::Identity, Activation::Identity)?;
    Ok(tape.clamp(out, -LOGIT_CLAMP, LOGIT_CLAMP))
}

/// Nodes of the training objective for one batch. Per-bag nodes are `B x 1`.
pub struct LossGraph {
    /// Mean over bags of the per-bag loss.
    pub loss: Var,
    pub per_bag: Var,
    pub elbo: Var,
    pub reconstruction: Var,
    pub kl_bag: Var,
    pub kl_instances: Var,
    pub log_q: Var,
    pub logit: Var,
}

fn check_finite(tape: &Tape, v: Var, term: &'static str) -> Result<(), ModelError> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { term })
    }
}

/// Builds `-(ELBO + alpha * log q(y | z_B, z_I))` for every bag in the batch.
pub fn build_loss(
    tape: &mut Tape,
    params: &MivaeParams,
    batch: &Batch,
    noise: &[BagNoise],
) -> Result<LossGraph, ModelError> {
    let c = &params.config;
    if noise.len() != batch.num_bags() {
        return Err(ModelError::Noise(format!("{} noise draws for {} bags", noise.len(), batch.num_bags())));
    }
    let mut eps_b = Vec::with_capacity(batch.num_bags() * c.bag_latent_dim);
    let mut eps_i = Vec::with_capacity(batch.segments.total_rows() * c.instance_latent_dim);
    for (n, range) in noise.iter().zip(batch.segments.ranges()) {
        if n.bag.len() != c.bag_latent_dim
            || n.instances.len() != range.len()
            || n.instances.iter().any(|e| e.len() != c.instance_latent_dim)
        {
            return Err(ModelError::Noise("noise shape does not match bag".into()));
        }
        eps_b.extend_from_slice(&n.bag);
        for e in &n.instances {
            eps_i.extend_from_slice(e);
        }
    }
    let segs = &batch.segments;
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.labels.clone());
    let eps_b = tape.constant(Tensor::matrix(batch.num_bags(), c.bag_latent_dim, eps_b)?);
    let eps_i = tape.constant(Tensor::matrix(segs.total_rows(), c.instance_latent_dim, eps_i)?);

    let enc = encode(tape, params, x, segs)?;
    let z_b = reparameterize(tape, enc.bag_mean, enc.bag_logvar, eps_b)?;
    let z_i = reparameterize(tape, enc.instance_mean, enc.instance_logvar, eps_i)?;

    let z_b_rows = tape.broadcast_segments(z_b, segs)?;
    let dec_in = tape.concat_cols(z_b_rows, z_i)?;
    let out = params.decoder.forward(tape, &params.store, dec_in, Activation::Relu, Activation::Identity)?;
    let ll = log_likelihood_rows(tape, c.likelihood, x, out)?;
    let reconstruction = tape.segment_sum(ll, segs)?;
    check_finite(tape, reconstruction, "reconstruction")?;

    let prior_mean = params.prior_net.forward(tape, &params.store, y, Activation::Relu, Activation::Identity)?;
    let kl_bag = kl_rows(tape, enc.bag_mean, enc.bag_logvar, Some(prior_mean))?;
    check_finite(tape, kl_bag, "bag KL")?;
    let kl_i = kl_rows(tape, enc.instance_mean, enc.instance_logvar, None)?;
    let kl_instances = tape.segment_sum(kl_i, segs)?;
    check_finite(tape, kl_instances, "instance KL")?;

    let inst = instance_logits(tape, params, z_i)?;
    let pooled = tape.segment_max(inst, segs)?;
    let logit = bag_logit(tape, params, z_b, pooled)?;
    // log q = y * log sigmoid(L) + (1 - y) * log(1 - sigmoid(L))
    let neg_logit = tape.neg(logit)?;
    let sp_neg = tape.softplus(neg_logit)?;
    let sp_pos = tape.softplus(logit)?;
    let one_minus_y = tape.constant(batch.labels.map(|v| 1.0 - v));
    let a = tape.mul(y, sp_neg)?;
    let b = tape.mul(one_minus_y, sp_pos)?;
    let nll = tape.add(a, b)?;
    let log_q = tape.neg(nll)?;
    check_finite(tape, log_q, "classifier")?;

    let elbo = tape.sub(reconstruction, kl_bag)?;
    let elbo = tape.sub(elbo, kl_instances)?;
    let weighted = tape.scale(log_q, c.alpha);
    let objective = tape.add(elbo, weighted)?;
    let per_bag = tape.neg(objective)?;
    let total = tape.sum_all(per_bag);
    let loss = tape.scale(total, 1.0 / batch.num_bags() as f64);
    check_finite(tape, loss, "loss")?;
    Ok(LossGraph { loss, per_bag, elbo, reconstruction, kl_bag, kl_instances, log_q, logit })
}

/// Posterior-mean predictions for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPrediction {
    pub bag_probabilities: Vec<f64>,
    /// Per bag, per instance, in storage order.
    pub instance_scores: Vec<Vec<f64>>,
}

pub fn predict_batch(params: &MivaeParams, batch: &Batch) -> Result<BatchPrediction, ModelError> {
    let mut tape = Tape::new();
    let segs = &batch.segments;
    let x = tape.constant(batch.x.clone());
    let enc = encode(&mut tape, params, x, segs)?;
    let inst = instance_logits(&mut tape, params, enc.instance_mean)?;
    let pooled = tape.segment_max(inst, segs)?;
    let logit = bag_logit(&mut tape, params, enc.bag_mean, pooled)?;
    let scores = tape.sigmoid(inst)?;
    let probs = tape.sigmoid(logit)?;
    let sv = tape.value(scores).values();
    let instance_scores = segs.ranges().iter().map(|r| sv[r.clone()].to_vec()).collect();
    Ok(BatchPrediction { bag_probabilities: tape.value(probs).values().to_vec(), instance_scores })
}
