//! Sampler for the two-level generative model.
//!
//! Per bag: `y ~ Bernoulli(p)`, `z_B ~ N(offset(y) * 1, I)`. Per instance:
//! `z_I ~ N(0, I)` and `x = A z_B + C z_I + noise * eps`. An instance is
//! positive iff `w . z_I > threshold` and the bag is positive. Positive bags
//! redraw all instance factors until at least one instance is positive;
//! negative bags draw each `z_I` from the half-space `w . z_I <= threshold`.

use serde::{Deserialize, Serialize};

use super::{Bag, DataError, MilDataset};
use crate::diff::Rng;

/// Upper bound on rejection-sampling attempts before a spec is declared infeasible.
pub const MAX_DRAWS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_bags: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Feature dimension `d`.
    pub dim: usize,
    pub bag_latent_dim: usize,
    pub instance_latent_dim: usize,
    pub offset_negative: f64,
    pub offset_positive: f64,
    pub noise: f64,
    pub threshold: f64,
    #[serde(default = "default_positive_rate")]
    pub positive_rate: f64,
    /// `d x bag_latent_dim`; random when absent.
    #[serde(default)]
    pub bag_loading: Option<Vec<Vec<f64>>>,
    /// `d x instance_latent_dim`; random when absent.
    #[serde(default)]
    pub instance_loading: Option<Vec<Vec<f64>>>,
    /// Direction `w` deciding instance positivity; random unit vector when absent.
    #[serde(default)]
    pub instance_direction: Option<Vec<f64>>,
}

fn default_positive_rate() -> f64 {
    0.5
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_bags: 200,
            min_instances: 5,
            max_instances: 15,
            dim: 20,
            bag_latent_dim: 4,
            instance_latent_dim: 4,
            offset_negative: 0.0,
            offset_positive: 1.5,
            noise: 0.1,
            threshold: 1.0,
            positive_rate: 0.5,
            bag_loading: None,
            instance_loading: None,
            instance_direction: None,
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, DataError> {
        let spec: SyntheticSpec = toml::from_str(text).map_err(|e| DataError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.num_bags == 0 || self.dim == 0 || self.bag_latent_dim == 0 || self.instance_latent_dim == 0 {
            return bad("num_bags, dim and latent dimensions must be positive");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad("need 1 <= min_instances <= max_instances");
        }
        if self.max_instances > 100_000 || self.num_bags > 1_000_000 || self.dim > 100_000 {
            return bad("synthetic spec too large");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return bad("positive_rate must be in [0, 1]");
        }
        if ![self.offset_negative, self.offset_positive, self.threshold].iter().all(|v| v.is_finite()) {
            return bad("offsets and threshold must be finite");
        }
        let check = |m: &Option<Vec<Vec<f64>>>, cols: usize, name: &str| -> Result<(), DataError> {
            if let Some(m) = m {
                if m.len() != self.dim || m.iter().any(|r| r.len() != cols || r.iter().any(|v| !v.is_finite())) {
                    return Err(DataError::Config(format!("{name} must be a finite {}x{cols} matrix", self.dim)));
                }
            }
            Ok(())
        };
        check(&self.bag_loading, self.bag_latent_dim, "bag_loading")?;
        check(&self.instance_loading, self.instance_latent_dim, "instance_loading")?;
        if let Some(w) = &self.instance_direction {
            if w.len() != self.instance_latent_dim || w.iter().any(|v| !v.is_finite()) {
                return bad("instance_direction must have instance_latent_dim finite entries");
            }
        }
        Ok(())
    }
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows).map(|_| (0..cols).map(|_| rng.normal() * scale).collect()).collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws a dataset with full instance labels. Equal seeds give identical output.
pub fn sample_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<MilDataset, DataError> {
    spec.validate()?;
    let mut mrng = Rng::derived(seed, "synthetic-loadings", 0, 0);
    let a = spec.bag_loading.clone().unwrap_or_else(|| random_matrix(&mut mrng, spec.dim, spec.bag_latent_dim));
    let c = spec
        .instance_loading
        .clone()
        .unwrap_or_else(|| random_matrix(&mut mrng, spec.dim, spec.instance_latent_dim));
    let w = spec.instance_direction.clone().unwrap_or_else(|| {
        let v = mrng.normals(spec.instance_latent_dim);
        let norm = dot(&v, &v).sqrt().max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x / norm).collect()
    });

    let mut rng = Rng::derived(seed, "synthetic", 0, 0);
    let width = spec.num_bags.to_string().len();
    let mut bags = Vec::with_capacity(spec.num_bags);
    for b in 0..spec.num_bags {
        let y = rng.bernoulli(spec.positive_rate);
        let offset = if y { spec.offset_positive } else { spec.offset_negative };
        let z_b: Vec<f64> = (0..spec.bag_latent_dim).map(|_| offset + rng.normal()).collect();
        let n = rng.int_inclusive(spec.min_instances, spec.max_instances);

        let z_i: Vec<Vec<f64>> = if y {
            let mut attempt = 0;
            loop {
                attempt += 1;
                let draws: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(spec.instance_latent_dim)).collect();
                if draws.iter().any(|z| dot(&w, z) > spec.threshold) {
                    break draws;
                }
                if attempt >= MAX_DRAWS {
                    return Err(DataError::Infeasible(format!(
                        "no positive instance after {MAX_DRAWS} draws for a positive bag of {n} instances"
                    )));
                }
            }
        } else {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let mut attempt = 0;
                let z = loop {
                    attempt += 1;
                    let z = rng.normals(spec.instance_latent_dim);
                    if dot(&w, &z) <= spec.threshold {
                        break z;
                    }
                    if attempt >= MAX_DRAWS {
                        return Err(DataError::Infeasible(format!(
                            "no negative instance after {MAX_DRAWS} draws"
                        )));
                    }
                };
                out.push(z);
            }
            out
        };

        let shared = mat_vec(&a, &z_b);
        let mut instances = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for z in &z_i {
            let own = mat_vec(&c, z);
            let x = (0..spec.dim).map(|k| shared[k] + own[k] + spec.noise * rng.normal()).collect();
            instances.push(x);
            labels.push(y && dot(&w, z) > spec.threshold);
        }
        bags.push(Bag::new(format!("bag{b:0width$}"), instances, y, Some(labels))?);
    }
    MilDataset::new("synthetic", bags)
}
