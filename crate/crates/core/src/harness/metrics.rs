//! Bag accuracy and instance-level average precision.

use super::HarnessError;
use crate::data::MilDataset;
use crate::model::{predict_batch, Batch, MivaeParams};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Bags per forward pass when scoring a dataset.
const PREDICT_CHUNK: usize = 64;

/// Bag probabilities and per-instance scores for every bag, in dataset order.
pub fn predict_dataset(params: &MivaeParams, dataset: &MilDataset) -> Result<(Vec<f64>, Vec<Vec<f64>>), HarnessError> {
    let mut probs = Vec::with_capacity(dataset.len());
    let mut scores = Vec::with_capacity(dataset.len());
    for chunk in dataset.bags().chunks(PREDICT_CHUNK) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = Batch::new(&refs, params.config.dim)?;
        let p = predict_batch(params, &batch)?;
        probs.extend(p.bag_probabilities);
        scores.extend(p.instance_scores);
    }
    Ok((probs, scores))
}

/// Fraction of bags whose thresholded probability equals the label.
pub fn bag_accuracy(probabilities: &[f64], labels: &[bool], threshold: f64) -> Result<f64, HarnessError> {
    if probabilities.is_empty() {
        return Err(HarnessError::UndefinedMetric("accuracy of an empty dataset".into()));
    }
    if probabilities.len() != labels.len() {
        return Err(HarnessError::UndefinedMetric(format!(
            "{} predictions for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let correct = probabilities.iter().zip(labels).filter(|(p, l)| (**p >= threshold) == **l).count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn evaluate_bag_accuracy(params: &MivaeParams, dataset: &MilDataset, threshold: f64) -> Result<f64, HarnessError> {
    let (probs, _) = predict_dataset(params, dataset)?;
    let labels: Vec<bool> = dataset.bags().iter().map(|b| b.label).collect();
    bag_accuracy(&probs, &labels, threshold)
}

/// Step-wise average precision. Equal scores form one threshold group.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, HarnessError> {
    if scores.len() != labels.len() {
        return Err(HarnessError::UndefinedMetric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(HarnessError::UndefinedMetric("NaN score".into()));
    }
    let npos = labels.iter().filter(|l| **l).count();
    if npos == 0 {
        return Err(HarnessError::UndefinedMetric("no positive instances".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / npos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Pooled instance labels for a dataset. Unlabelled negative bags count as all-negative.
pub fn instance_labels(dataset: &MilDataset) -> Result<Vec<Vec<bool>>, HarnessError> {
    dataset
        .bags()
        .iter()
        .map(|b| match (&b.instance_labels, b.label) {
            (Some(l), _) => Ok(l.clone()),
            (None, false) => Ok(vec![false; b.len()]),
            (None, true) => Err(HarnessError::UndefinedMetric(format!("positive bag {} has no instance labels", b.id))),
        })
        .collect()
}

pub fn evaluate_instance_aucpr(params: &MivaeParams, dataset: &MilDataset) -> Result<f64, HarnessError> {
    let labels = instance_labels(dataset)?;
    let (_, scores) = predict_dataset(params, dataset)?;
    let flat_scores: Vec<f64> = scores.into_iter().flatten().collect();
    let flat_labels: Vec<bool> = labels.into_iter().flatten().collect();
    average_precision(&flat_scores, &flat_labels)
}
