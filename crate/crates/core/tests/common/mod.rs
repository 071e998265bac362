#![allow(dead_code)]

use mivae::data::{Bag, MilDataset};
use mivae::diff::{DiffError, Rng, Tape, Tensor, Var};
use mivae::model::{BagNoise, MivaeConfig, MivaeParams};

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn random_tensor(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Evaluates `sum(weights * build(inputs))` on a fresh tape.
fn weighted_output(
    inputs: &[Tensor],
    weights: &Tensor,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
    grads: bool,
) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let total = tape.sum_all(prod);
    let value = tape.value(total).item();
    if !grads {
        return (value, Vec::new());
    }
    let g = tape.backward(total).unwrap();
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.var(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, gs)
}

/// Largest relative error between tape gradients and central differences
/// of a random linear functional of `build`'s output, over every input entry.
pub fn primitive_fd_error(
    rng: &mut Rng,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
) -> f64 {
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let n: usize = shape.iter().product();
    let weights = Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
    let (_, analytic) = weighted_output(inputs, &weights, build, true);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].values_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].values_mut()[i] -= FD_STEP;
            let fp = weighted_output(&plus, &weights, build, false).0;
            let fm = weighted_output(&minus, &weights, build, false).0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k].values()[i], numeric, 1e-3));
        }
    }
    worst
}

pub fn random_bag(rng: &mut Rng, id: &str, n: usize, dim: usize, label: bool) -> Bag {
    let instances = (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
    Bag::new(id, instances, label, None).unwrap()
}

/// Bags with instance labels; positive bags get at least one positive instance.
pub fn labelled_dataset(rng: &mut Rng, bags: usize, dim: usize) -> MilDataset {
    let bags = (0..bags)
        .map(|b| {
            let label = b % 2 == 0;
            let n = rng.int_inclusive(1, 5);
            let mut inst: Vec<bool> = (0..n).map(|_| label && rng.bernoulli(0.4)).collect();
            if label && !inst.iter().any(|v| *v) {
                inst[0] = true;
            }
            let instances =
                inst.iter().map(|&p| (0..dim).map(|_| rng.normal() + if p { 2.0 } else { 0.0 }).collect()).collect();
            Bag::new(format!("b{b}"), instances, label, Some(inst)).unwrap()
        })
        .collect();
    MilDataset::new("toy", bags).unwrap()
}

pub fn small_params(rng: &mut Rng, dim: usize, hidden_layers: usize, hidden_units: usize, alpha: f64) -> MivaeParams {
    let cfg = MivaeConfig { hidden_layers, hidden_units, alpha, ..MivaeConfig::new(dim, 2) };
    MivaeParams::init(&cfg, rng).unwrap()
}

pub fn noise_for(params: &MivaeParams, bag: &Bag, rng: &mut Rng) -> BagNoise {
    BagNoise::draw(params.config.bag_latent_dim, params.config.instance_latent_dim, bag.len(), rng)
}

/// Largest relative error between tape gradients of the bag loss and central
/// differences, over every scalar parameter. `None` when some stencil straddles
/// a kink (ReLU, clamp or max switch), detected by central differences with
/// steps `FD_STEP` and `FD_STEP / 10` disagreeing; the analytic gradient plays
/// no part in that decision.
pub fn model_fd_error(params: &MivaeParams, bag: &Bag, y: bool, noise: &BagNoise) -> Option<f64> {
    use mivae::model::ops::{loss_and_gradients, loss_with_noise};
    let (_, grads) = loss_and_gradients(params, bag, y, noise).unwrap();
    let central = |id, i: usize, h: f64| {
        let mut plus = params.clone();
        plus.store.get_mut(id).values_mut()[i] += h;
        let mut minus = params.clone();
        minus.store.get_mut(id).values_mut()[i] -= h;
        (loss_with_noise(&plus, bag, y, noise).unwrap() - loss_with_noise(&minus, bag, y, noise).unwrap()) / (2.0 * h)
    };
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(params.store.get(id).shape()));
        for i in 0..analytic.len() {
            let numeric = central(id, i, FD_STEP);
            if rel_err(numeric, central(id, i, FD_STEP / 10.0), 1e-3) > 1e-5 {
                return None;
            }
            worst = worst.max(rel_err(analytic.values()[i], numeric, 1e-3));
        }
    }
    Some(worst)
}

/// Draws random small models until `count` of them have smooth stencils.
/// Returns the worst error and the number of rejected draws.
pub fn smooth_gradient_checks(rng: &mut Rng, count: usize) -> (f64, usize) {
    let (mut worst, mut rejected, mut done) = (0.0f64, 0, 0);
    while done < count {
        let (params, bag, y, noise) = random_small_model(rng);
        match model_fd_error(&params, &bag, y, &noise) {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => rejected += 1,
        }
    }
    (worst, rejected)
}

/// Small random model with every weight and bias drawn from `U(-0.5, 0.5)`.
pub fn random_small_model(rng: &mut Rng) -> (MivaeParams, Bag, bool, BagNoise) {
    let dim = rng.int_inclusive(1, 4);
    let n = rng.int_inclusive(1, 3);
    let layers = rng.int_inclusive(0, 2);
    let units = rng.int_inclusive(2, 5);
    let alpha = rng.uniform(0.0, 10.0);
    let mut params = small_params(rng, dim, layers, units, alpha);
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        for v in params.store.get_mut(id).values_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    let y = rng.bernoulli(0.5);
    let bag = random_bag(rng, "g", n, dim, y);
    let noise = noise_for(&params, &bag, rng);
    (params, bag, y, noise)
}

/// `KL(N(mu, var) || N(m, 1))` by composite Simpson quadrature over `mu +- 12 sd`.
pub fn kl_quadrature(mu: f64, var: f64, m: f64) -> f64 {
    let sd = var.sqrt();
    let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
    let steps = 20_000;
    let h = (hi - lo) / steps as f64;
    let f = |x: f64| {
        let log_q = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mu).powi(2) / (2.0 * var);
        let log_p = -0.5 * (2.0 * std::f64::consts::PI).ln() - (x - m).powi(2) / 2.0;
        log_q.exp() * (log_q - log_p)
    };
    let mut s = f(lo) + f(hi);
    for k in 1..steps {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + k as f64 * h);
    }
    s * h / 3.0
}

/// Average precision by recounting hits above every distinct threshold.
pub fn ap_brute_force(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let npos = labels.iter().filter(|l| **l).count();
    if npos == 0 {
        return None;
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let hits = selected.iter().filter(|&&i| labels[i]).count();
        let recall = hits as f64 / npos as f64;
        let precision = hits as f64 / selected.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}
