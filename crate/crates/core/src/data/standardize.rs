use serde::{Deserialize, Serialize};

use super::{DataError, MilDataset};

/// Features whose training standard deviation is below this are only centered.
pub const MIN_STD: f64 = 1e-12;

/// Per-feature z-score statistics fitted on training instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits population mean and standard deviation over every training instance.
    pub fn fit(train: &MilDataset) -> Result<Self, DataError> {
        let n = train.num_instances();
        if n == 0 {
            return Err(DataError::Empty(train.name.clone()));
        }
        let d = train.dim();
        let mut mean = vec![0.0; d];
        for x in train.bags().iter().flat_map(|b| &b.instances) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for x in train.bags().iter().flat_map(|b| &b.instances) {
            for k in 0..d {
                let c = x[k] - mean[k];
                var[k] += c * c;
            }
        }
        let std = var.into_iter().map(|v| (v / n as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_instance(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s < MIN_STD { v - m } else { (v - m) / s })
            .collect()
    }

    pub fn transform(&self, dataset: &MilDataset) -> Result<MilDataset, DataError> {
        if dataset.dim() != self.dim() {
            return Err(DataError::DimensionMismatch { expected: self.dim(), found: dataset.dim() });
        }
        Ok(dataset.map_instances(|x| self.transform_instance(x)))
    }
}

/// Fits on `train` and applies the same statistics to `train` and every other set.
pub fn standardize(
    train: &MilDataset,
    others: &[&MilDataset],
) -> Result<(MilDataset, Vec<MilDataset>, Standardizer), DataError> {
    let stats = Standardizer::fit(train)?;
    let train_out = stats.transform(train)?;
    let rest = others.iter().map(|d| stats.transform(d)).collect::<Result<Vec<_>, _>>()?;
    Ok((train_out, rest, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Bag;

    fn ds(rows: &[&[f64]]) -> MilDataset {
        let bags = rows
            .iter()
            .enumerate()
            .map(|(i, r)| Bag::new(format!("b{i}"), vec![r.to_vec()], i % 2 == 0, None).unwrap())
            .collect();
        MilDataset::new("s", bags).unwrap()
    }

    #[test]
    fn two_values_become_plus_minus_one() {
        let train = ds(&[&[1.0, 4.0], &[3.0, 4.0]]);
        let (out, _, stats) = standardize(&train, &[]).unwrap();
        assert_eq!(out.bags()[0].instances[0][0], -1.0);
        assert_eq!(out.bags()[1].instances[0][0], 1.0);
        // constant feature centered, not divided
        assert_eq!(stats.std[1], 0.0);
        assert_eq!(out.bags()[0].instances[0][1], 0.0);
    }

    #[test]
    fn held_out_uses_train_statistics() {
        let train = ds(&[&[1.0], &[3.0], &[8.0]]);
        let held = ds(&[&[10.0], &[-2.0]]);
        let (_, rest, stats) = standardize(&train, &[&held]).unwrap();
        let mu = (1.0 + 3.0 + 8.0) / 3.0;
        let sd = (((1.0f64 - mu).powi(2) + (3.0f64 - mu).powi(2) + (8.0f64 - mu).powi(2)) / 3.0).sqrt();
        assert_eq!(stats.mean[0], mu);
        assert!((rest[0].bags()[0].instances[0][0] - (10.0 - mu) / sd).abs() < 1e-15);
        assert!((rest[0].bags()[1].instances[0][0] - (-2.0 - mu) / sd).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let stats = Standardizer { mean: vec![0.0; 3], std: vec![1.0; 3] };
        assert!(stats.transform(&ds(&[&[1.0]])).is_err());
    }
}
