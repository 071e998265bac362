//! Single-bag entry points over the batched graph.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::graph::{self, Batch, BagNoise, LOGIT_CLAMP, LOGVAR_MAX, LOGVAR_MIN};
use super::{MivaeParams, ModelError};
use crate::data::Bag;
use crate::diff::{sigmoid, Activation, Gradients, Rng, Segments, Tape, Tensor};

/// Diagonal Gaussian parameterized by mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self, ModelError> {
        if mean.len() != logvar.len() || mean.is_empty() {
            return Err(ModelError::Dimension { what: "posterior", expected: mean.len(), found: logvar.len() });
        }
        if mean.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { term: "posterior" });
        }
        let logvar = logvar.into_iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect();
        Ok(Self { mean, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.logvar.iter().map(|v| v.exp()).collect()
    }
}

/// Per-bag decomposition of the evidence lower bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboParts {
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl_bag: f64,
    pub kl_instances: f64,
}

fn check_instance(params: &MivaeParams, x: &[f64]) -> Result<(), ModelError> {
    if x.len() != params.config.dim {
        return Err(ModelError::Dimension { what: "feature", expected: params.config.dim, found: x.len() });
    }
    Ok(())
}

fn encode_with(params: &MivaeParams, x: &[f64], bag_side: bool) -> Result<GaussianPosterior, ModelError> {
    check_instance(params, x)?;
    let (net, latent) = if bag_side {
        (&params.bag_encoder, params.config.bag_latent_dim)
    } else {
        (&params.instance_encoder, params.config.instance_latent_dim)
    };
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::row(x.to_vec()));
    let h = net.forward(&mut tape, &params.store, xv, Activation::Relu, Activation::Identity)?;
    let out = tape.value(h).values();
    GaussianPosterior::new(out[..latent].to_vec(), out[latent..2 * latent].to_vec())
}

/// `q(z_I | x)` for one instance.
pub fn encode_instance(params: &MivaeParams, x: &[f64]) -> Result<GaussianPosterior, ModelError> {
    encode_with(params, x, false)
}

/// Intermediate bag-factor posterior `q(z_B_hat | x)` for one instance.
pub fn encode_intermediate_bag(params: &MivaeParams, x: &[f64]) -> Result<GaussianPosterior, ModelError> {
    encode_with(params, x, true)
}

/// Bag posterior: arithmetic mean of the means and of the variances.
pub fn aggregate_bag(intermediates: &[GaussianPosterior]) -> Result<GaussianPosterior, ModelError> {
    let first = intermediates.first().ok_or(ModelError::EmptyBag("aggregate".into()))?;
    let dim = first.dim();
    if let Some(bad) = intermediates.iter().find(|p| p.dim() != dim) {
        return Err(ModelError::Dimension { what: "posterior", expected: dim, found: bad.dim() });
    }
    let mut tape = Tape::new();
    let rows = |f: fn(&GaussianPosterior) -> &Vec<f64>| {
        Tensor::matrix(intermediates.len(), dim, intermediates.iter().flat_map(|p| f(p).iter().copied()).collect())
    };
    let mean = tape.constant(rows(|p| &p.mean)?);
    let logvar = tape.constant(rows(|p| &p.logvar)?);
    let segs = Arc::new(Segments::from_lengths(&[intermediates.len()])?);
    let (m, lv) = graph::aggregate(&mut tape, mean, logvar, &segs)?;
    Ok(GaussianPosterior { mean: tape.value(m).values().to_vec(), logvar: tape.value(lv).values().to_vec() })
}

/// Prior mean `f_y(y)` of the bag factor; the prior variance is 1.
pub fn prior_bag(params: &MivaeParams, y: bool) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let yv = tape.constant(Tensor::scalar(if y { 1.0 } else { 0.0 }));
    let m = params.prior_net.forward(&mut tape, &params.store, yv, Activation::Relu, Activation::Identity)?;
    Ok(tape.value(m).values().to_vec())
}

/// `mean + exp(logvar / 2) * eps` with `eps ~ N(0, I)`.
pub fn reparameterize(post: &GaussianPosterior, rng: &mut Rng) -> Vec<f64> {
    post.mean
        .iter()
        .zip(&post.logvar)
        .map(|(m, lv)| m + (0.5 * lv).exp() * rng.normal())
        .collect()
}

/// Decoder output for one instance: means (Gaussian) or logits (Bernoulli).
pub fn decode(params: &MivaeParams, z_b: &[f64], z_i: &[f64]) -> Result<Vec<f64>, ModelError> {
    let c = &params.config;
    if z_b.len() != c.bag_latent_dim {
        return Err(ModelError::Dimension { what: "bag latent", expected: c.bag_latent_dim, found: z_b.len() });
    }
    if z_i.len() != c.instance_latent_dim {
        return Err(ModelError::Dimension { what: "instance latent", expected: c.instance_latent_dim, found: z_i.len() });
    }
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::row(z_b.iter().chain(z_i).copied().collect()));
    let out = params.decoder.forward(&mut tape, &params.store, z, Activation::Relu, Activation::Identity)?;
    Ok(tape.value(out).values().to_vec())
}

/// Closed-form `KL(q || N(prior_mean, 1))` summed over dimensions.
pub fn kl_to_prior(post: &GaussianPosterior, prior_mean: &[f64]) -> Result<f64, ModelError> {
    if prior_mean.len() != post.dim() {
        return Err(ModelError::Dimension { what: "prior", expected: post.dim(), found: prior_mean.len() });
    }
    Ok(post
        .mean
        .iter()
        .zip(&post.logvar)
        .zip(prior_mean)
        .map(|((mu, lv), m)| 0.5 * (lv.exp() + (mu - m).powi(2) - 1.0 - lv))
        .sum())
}

/// `f_omega_I(z_I)` as a probability.
pub fn instance_score(params: &MivaeParams, z_i: &[f64]) -> Result<f64, ModelError> {
    let c = &params.config;
    if z_i.len() != c.instance_latent_dim {
        return Err(ModelError::Dimension { what: "instance latent", expected: c.instance_latent_dim, found: z_i.len() });
    }
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::row(z_i.to_vec()));
    let l = graph::instance_logits(&mut tape, params, z)?;
    Ok(sigmoid(tape.value(l).item()))
}

pub fn pool_max(scores: &[f64]) -> Result<f64, ModelError> {
    scores
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(ModelError::EmptyBag("pool".into()))
}

fn clamped_logit(p: f64) -> f64 {
    (p.ln() - (-p).ln_1p()).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// `q(y = 1 | f_omega_B(z_B), f_I)` from a bag factor and a pooled instance probability.
pub fn bag_classifier(params: &MivaeParams, z_b: &[f64], pooled: f64) -> Result<f64, ModelError> {
    let c = &params.config;
    if z_b.len() != c.bag_latent_dim {
        return Err(ModelError::Dimension { what: "bag latent", expected: c.bag_latent_dim, found: z_b.len() });
    }
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::row(z_b.to_vec()));
    let p = tape.constant(Tensor::scalar(clamped_logit(pooled)));
    let l = graph::bag_logit(&mut tape, params, z, p)?;
    Ok(sigmoid(tape.value(l).item()))
}

fn single_batch(params: &MivaeParams, bag: &Bag, y: bool) -> Result<Batch, ModelError> {
    let mut batch = Batch::new(&[bag], params.config.dim)?;
    batch.labels = Tensor::scalar(if y { 1.0 } else { 0.0 });
    Ok(batch)
}

pub fn draw_noise(params: &MivaeParams, bag: &Bag, rng: &mut Rng) -> BagNoise {
    BagNoise::draw(params.config.bag_latent_dim, params.config.instance_latent_dim, bag.len(), rng)
}

/// ELBO of one bag under the given reparameterization noise.
pub fn elbo_with_noise(params: &MivaeParams, bag: &Bag, y: bool, noise: &BagNoise) -> Result<ElboParts, ModelError> {
    let batch = single_batch(params, bag, y)?;
    let mut tape = Tape::new();
    let g = graph::build_loss(&mut tape, params, &batch, std::slice::from_ref(noise))?;
    let reconstruction = tape.value(g.reconstruction).item();
    let kl_bag = tape.value(g.kl_bag).item();
    let kl_instances = tape.value(g.kl_instances).item();
    Ok(ElboParts { elbo: tape.value(g.elbo).item(), reconstruction, kl_bag, kl_instances })
}

/// Single-sample Monte Carlo ELBO (one shared `z_B` draw, one `z_I` draw per instance).
pub fn elbo(params: &MivaeParams, bag: &Bag, y: bool, rng: &mut Rng) -> Result<ElboParts, ModelError> {
    let noise = draw_noise(params, bag, rng);
    elbo_with_noise(params, bag, y, &noise)
}

/// Objective to minimize for one bag under the given noise.
pub fn loss_with_noise(params: &MivaeParams, bag: &Bag, y: bool, noise: &BagNoise) -> Result<f64, ModelError> {
    let batch = single_batch(params, bag, y)?;
    let mut tape = Tape::new();
    let g = graph::build_loss(&mut tape, params, &batch, std::slice::from_ref(noise))?;
    Ok(tape.value(g.loss).item())
}

pub fn loss(params: &MivaeParams, bag: &Bag, y: bool, rng: &mut Rng) -> Result<f64, ModelError> {
    let noise = draw_noise(params, bag, rng);
    loss_with_noise(params, bag, y, &noise)
}

/// Loss and parameter gradients for one bag under the given noise.
pub fn loss_and_gradients(
    params: &MivaeParams,
    bag: &Bag,
    y: bool,
    noise: &BagNoise,
) -> Result<(f64, Gradients), ModelError> {
    let batch = single_batch(params, bag, y)?;
    let mut tape = Tape::new();
    let g = graph::build_loss(&mut tape, params, &batch, std::slice::from_ref(noise))?;
    let grads = tape.backward(g.loss)?;
    Ok((tape.value(g.loss).item(), grads))
}

/// Instance scores at the posterior mean of `q(z_I | x)`, in storage order.
pub fn predict_instances(params: &MivaeParams, bag: &Bag) -> Result<Vec<f64>, ModelError> {
    let batch = Batch::new(&[bag], params.config.dim)?;
    let mut p = graph::predict_batch(params, &batch)?;
    Ok(p.instance_scores.pop().expect("one bag"))
}

/// Probability of a positive bag from posterior means; the label is not used.
pub fn predict_bag(params: &MivaeParams, bag: &Bag) -> Result<f64, ModelError> {
    let batch = Batch::new(&[bag], params.config.dim)?;
    Ok(graph::predict_batch(params, &batch)?.bag_probabilities[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MivaeConfig;

    fn cfg() -> MivaeConfig {
        MivaeConfig { hidden_layers: 1, hidden_units: 6, ..MivaeConfig::new(3, 2) }
    }

    fn params(seed: u64) -> MivaeParams {
        MivaeParams::init(&cfg(), &mut Rng::from_seed(seed)).unwrap()
    }

    fn bag() -> Bag {
        Bag::new("b", vec![vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7], vec![-0.4, 0.9, 0.1]], true, None).unwrap()
    }

    #[test]
    fn zero_network_outputs() {
        let p = params(0).zeroed();
        let x = [1.0, 2.0, 3.0];
        let q = encode_instance(&p, &x).unwrap();
        assert_eq!(q.mean, vec![0.0, 0.0]);
        assert_eq!(q.logvar, vec![0.0, 0.0]);
        assert_eq!(encode_intermediate_bag(&p, &x).unwrap().mean, vec![0.0, 0.0]);
        assert_eq!(prior_bag(&p, true).unwrap(), vec![0.0, 0.0]);
        assert_eq!(prior_bag(&p, false).unwrap(), vec![0.0, 0.0]);
        assert_eq!(instance_score(&p, &[3.0, -1.0]).unwrap(), 0.5);
        assert_eq!(bag_classifier(&p, &[1.0, 1.0], 0.9).unwrap(), 0.5);
    }

    #[test]
    fn one_layer_encoder_matches_affine() {
        let c = MivaeConfig { hidden_layers: 0, ..cfg() };
        let p = MivaeParams::init(&c, &mut Rng::from_seed(4)).unwrap();
        let x = [0.5, -1.0, 2.0];
        let layer = &p.instance_encoder.layers()[0];
        let w = p.store.get(layer.weight);
        let b = p.store.get(layer.bias);
        let affine: Vec<f64> = (0..4).map(|j| b.values()[j] + (0..3).map(|i| x[i] * w.get(i, j)).sum::<f64>()).collect();
        let q = encode_instance(&p, &x).unwrap();
        for k in 0..2 {
            assert!((q.mean[k] - affine[k]).abs() < 1e-14);
            assert!((q.logvar[k] - affine[2 + k]).abs() < 1e-14);
        }
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let p = params(2);
        let b = bag();
        let a = encode_intermediate_bag(&p, &b.instances[0]).unwrap();
        let c = encode_intermediate_bag(&p, &b.instances[1]).unwrap();
        assert_ne!(a, c);
        assert_eq!(a, encode_intermediate_bag(&p, &b.instances[0]).unwrap());
        assert_eq!(encode_instance(&p, &b.instances[2]).unwrap().dim(), 2);
        assert!(encode_instance(&p, &[1.0]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let one = GaussianPosterior::new(vec![0.4, -2.0], vec![0.3, -1.0]).unwrap();
        let agg = aggregate_bag(std::slice::from_ref(&one)).unwrap();
        assert!((agg.mean[0] - 0.4).abs() < 1e-15 && (agg.logvar[1] + 1.0).abs() < 1e-15);
        let a = GaussianPosterior::new(vec![1.0], vec![0.0]).unwrap();
        let b = GaussianPosterior::new(vec![3.0], vec![3f64.ln()]).unwrap();
        let agg = aggregate_bag(&[a, b]).unwrap();
        assert_eq!(agg.mean, vec![2.0]);
        assert!((agg.logvar[0] - 2f64.ln()).abs() < 1e-15);
        assert!(aggregate_bag(&[]).is_err());
    }

    #[test]
    fn kl_examples() {
        let q = GaussianPosterior::new(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(kl_to_prior(&q, &[0.0]).unwrap(), 0.0);
        let q = GaussianPosterior::new(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(kl_to_prior(&q, &[0.0]).unwrap(), 0.5);
        let q = GaussianPosterior::new(vec![0.0], vec![4f64.ln()]).unwrap();
        assert!((kl_to_prior(&q, &[0.0]).unwrap() - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn reparameterize_degenerate_variance() {
        let q = GaussianPosterior::new(vec![1.0, -3.0], vec![-50.0, -50.0]).unwrap();
        assert_eq!(q.logvar, vec![-10.0, -10.0]);
        let mut rng = Rng::from_seed(1);
        for _ in 0..1000 {
            let z = reparameterize(&q, &mut rng);
            assert!((z[0] - 1.0).abs() < 0.01 * 4.0 && (z[1] + 3.0).abs() < 0.04);
        }
    }

    #[test]
    fn pool_max_examples() {
        assert_eq!(pool_max(&[0.2, 0.9, 0.1]).unwrap(), 0.9);
        assert_eq!(pool_max(&[0.4]).unwrap(), 0.4);
        assert_eq!(pool_max(&[0.1, 0.2, 0.9]).unwrap(), 0.9);
        assert!(pool_max(&[]).is_err());
    }

    #[test]
    fn decode_shape_and_determinism() {
        let p = params(3);
        let a = decode(&p, &[0.1, 0.2], &[0.3, -0.4]).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, decode(&p, &[0.1, 0.2], &[0.3, -0.4]).unwrap());
    }

    #[test]
    fn alpha_zero_loss_is_negative_elbo() {
        let c = MivaeConfig { alpha: 0.0, ..cfg() };
        let p = MivaeParams::init(&c, &mut Rng::from_seed(5)).unwrap();
        let b = bag();
        let noise = draw_noise(&p, &b, &mut Rng::from_seed(6));
        let e = elbo_with_noise(&p, &b, true, &noise).unwrap();
        let l = loss_with_noise(&p, &b, true, &noise).unwrap();
        assert_eq!(l, -e.elbo);
        assert!(e.kl_bag >= 0.0 && e.kl_instances >= 0.0);
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let p = params(7);
        let b = bag();
        let noise = draw_noise(&p, &b, &mut Rng::from_seed(8));
        let e = elbo_with_noise(&p, &b, false, &noise).unwrap();
        let inter: Vec<_> = b.instances.iter().map(|x| encode_intermediate_bag(&p, x).unwrap()).collect();
        let q_b = aggregate_bag(&inter).unwrap();
        let kl_b = kl_to_prior(&q_b, &prior_bag(&p, false).unwrap()).unwrap();
        assert!((kl_b - e.kl_bag).abs() < 1e-12);
        let kl_i: f64 = b.instances.iter().map(|x| kl_to_prior(&encode_instance(&p, x).unwrap(), &[0.0, 0.0]).unwrap()).sum();
        assert!((kl_i - e.kl_instances).abs() < 1e-12);
    }

    #[test]
    fn predictions_deterministic_and_in_range() {
        let p = params(9);
        let b = bag();
        let s = predict_instances(&p, &b).unwrap();
        assert_eq!(s, predict_instances(&p, &b).unwrap());
        assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0));
        let pb = predict_bag(&p, &b).unwrap();
        assert_eq!(pb.to_bits(), predict_bag(&p, &b).unwrap().to_bits());
        // isolation: each score equals the score of that instance alone
        for (j, x) in b.instances.iter().enumerate() {
            let alone = Bag::new("one", vec![x.clone()], false, None).unwrap();
            assert_eq!(predict_instances(&p, &alone).unwrap()[0], s[j]);
        }
    }

    #[test]
    fn bag_classifier_increasing_in_pooled_score() {
        let mut p = params(10);
        let comb = p.combiner.layers()[0].weight;
        p.store.get_mut(comb).values_mut().copy_from_slice(&[0.3, 0.8]);
        let z = [0.2, -0.1];
        let lo = bag_classifier(&p, &z, 0.1).unwrap();
        let hi = bag_classifier(&p, &z, 0.9).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn gaussian_likelihood_formula() {
        let p = params(11);
        let b = Bag::new("g", vec![vec![0.5, -0.2, 1.0]], true, None).unwrap();
        let noise = BagNoise::zeros(2, 2, 1);
        let e = elbo_with_noise(&p, &b, true, &noise).unwrap();
        let q_b = aggregate_bag(&[encode_intermediate_bag(&p, &b.instances[0]).unwrap()]).unwrap();
        let q_i = encode_instance(&p, &b.instances[0]).unwrap();
        let m = decode(&p, &q_b.mean, &q_i.mean).unwrap();
        let sq: f64 = b.instances[0].iter().zip(&m).map(|(x, m)| (x - m).powi(2)).sum();
        let expect = -0.5 * sq - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((e.reconstruction - expect).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let q = GaussianPosterior::new(vec![0.7, -1.2], vec![0.5, -0.3]).unwrap();
        let mut rng = Rng::from_seed(12);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let z = reparameterize(&q, &mut rng);
            sum[0] += z[0];
            sum[1] += z[1];
        }
        for k in 0..2 {
            let sd = (0.5 * q.logvar[k]).exp();
            assert!((sum[k] / n as f64 - q.mean[k]).abs() < 3.0 * sd / (n as f64).sqrt() * 1.5);
        }
    }

    fn log_normal(z: &[f64], mean: &[f64], logvar: &[f64]) -> f64 {
        z.iter()
            .zip(mean)
            .zip(logvar)
            .map(|((z, m), lv)| -0.5 * ((z - m).powi(2) / lv.exp() + lv + (2.0 * std::f64::consts::PI).ln()))
            .sum()
    }

    #[test]
    fn elbo_below_importance_sampled_evidence() {
        let c = MivaeConfig { dim: 2, hidden_layers: 1, hidden_units: 5, ..MivaeConfig::new(2, 2) };
        let p = MivaeParams::init(&c, &mut Rng::from_seed(13)).unwrap();
        let b = Bag::new("t", vec![vec![0.4, -0.6], vec![1.1, 0.3]], true, None).unwrap();
        let q_b = aggregate_bag(&b.instances.iter().map(|x| encode_intermediate_bag(&p, x).unwrap()).collect::<Vec<_>>()).unwrap();
        let q_i: Vec<_> = b.instances.iter().map(|x| encode_instance(&p, x).unwrap()).collect();
        let prior = prior_bag(&p, true).unwrap();
        let zeros = [0.0, 0.0];
        let mut rng = Rng::from_seed(14);
        let n = 10_000;
        let mut log_w = Vec::with_capacity(n);
        let mut elbo_sum = 0.0;
        for _ in 0..n {
            let z_b = reparameterize(&q_b, &mut rng);
            let mut lw = log_normal(&z_b, &prior, &zeros) - log_normal(&z_b, &q_b.mean, &q_b.logvar);
            for (x, q) in b.instances.iter().zip(&q_i) {
                let z_i = reparameterize(q, &mut rng);
                let m = decode(&p, &z_b, &z_i).unwrap();
                lw += log_normal(x, &m, &zeros) + log_normal(&z_i, &zeros, &zeros) - log_normal(&z_i, &q.mean, &q.logvar);
            }
            log_w.push(lw);
            elbo_sum += elbo(&p, &b, true, &mut rng).unwrap().elbo;
        }
        let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let evidence = top + (log_w.iter().map(|w| (w - top).exp()).sum::<f64>() / n as f64).ln();
        let mean_elbo = elbo_sum / n as f64;
        // the sample-average log weight is itself an unbiased ELBO estimate
        let mean_log_w = log_w.iter().sum::<f64>() / n as f64;
        assert!((mean_log_w - mean_elbo).abs() < 0.05 * mean_elbo.abs().max(1.0), "{mean_log_w} vs {mean_elbo}");
        assert!(mean_elbo <= evidence, "{mean_elbo} > {evidence}");
    }
}
