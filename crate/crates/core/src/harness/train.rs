//! Minibatch AdamW training with validation-loss model selection.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{bag_accuracy, predict_dataset, DEFAULT_THRESHOLD};
use super::HarnessError;
use crate::data::{format_f64, Bag, MilDataset};
use crate::diff::{AdamWConfig, AdamWState, Rng, Tape};
use crate::model::{build_loss, BagNoise, Batch, MivaeConfig, MivaeParams, ModelError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_bags")]
    pub batch_bags: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    100
}
fn default_batch_bags() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-2
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_bags: default_batch_bags(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.epochs == 0 {
            return Err(HarnessError::Config("epochs must be at least 1".into()));
        }
        if self.batch_bags == 0 {
            return Err(HarnessError::Config("batch_bags must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HarnessError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(HarnessError::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Not covered by determinism guarantees.
    pub wall_seconds: f64,
}

pub const EPOCH_LOG_COLUMNS: [&str; 5] = ["epoch", "train_loss", "val_loss", "val_accuracy", "wall_seconds"];

pub fn write_epoch_logs<W: Write>(logs: &[EpochLog], writer: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EPOCH_LOG_COLUMNS).map_err(HarnessError::csv)?;
    for l in logs {
        w.write_record([
            l.epoch.to_string(),
            format_f64(l.train_loss),
            format_f64(l.val_loss),
            format_f64(l.val_accuracy),
            format!("{:.6}", l.wall_seconds),
        ])
        .map_err(HarnessError::csv)?;
    }
    w.flush().map_err(|e| HarnessError::io("epoch log", e))?;
    Ok(())
}

pub fn save_epoch_logs(logs: &[EpochLog], path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    write_epoch_logs(logs, std::io::BufWriter::new(file))
}

/// Index of the epoch to keep: lowest validation loss, earliest on ties.
///
/// Takes only validation losses so test data cannot influence selection.
pub fn select_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.map_or(true, |b| v < val_losses[b]) {
            best = Some(i);
        }
    }
    best
}

/// Where a training run draws its randomness from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stream {
    pub seed: u64,
    pub repeat: u64,
    pub fold: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self { seed, repeat: 0, fold: 0 }
    }

    pub fn rng(&self, tag: &str) -> Rng {
        Rng::derived(self.seed, tag, self.repeat, self.fold)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MivaeParams,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
    pub logs: Vec<EpochLog>,
    /// Optimizer and rng state as of the kept epoch.
    pub optimizer: AdamWState,
    pub rng: Rng,
}

fn draw_noise(cfg: &MivaeConfig, bags: &[&Bag], rng: &mut Rng) -> Vec<BagNoise> {
    bags.iter()
        .map(|b| BagNoise::draw(cfg.bag_latent_dim, cfg.instance_latent_dim, b.len(), rng))
        .collect()
}

/// Mean per-bag loss over a dataset under noise from `rng`, without gradients.
pub fn dataset_loss(params: &MivaeParams, dataset: &MilDataset, batch_bags: usize, rng: &mut Rng) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for chunk in dataset.bags().chunks(batch_bags.max(1)) {
        let refs: Vec<&Bag> = chunk.iter().collect();
        let batch = Batch::new(&refs, params.config.dim)?;
        let noise = draw_noise(&params.config, &refs, rng);
        let mut tape = Tape::new();
        let g = build_loss(&mut tape, params, &batch, &noise)?;
        total += tape.value(g.per_bag).sum();
    }
    Ok(total / dataset.len() as f64)
}

/// Trains from freshly initialized parameters.
pub fn train(
    train_set: &MilDataset,
    val_set: &MilDataset,
    model: &MivaeConfig,
    cfg: &TrainConfig,
    stream: Stream,
) -> Result<TrainOutcome, HarnessError> {
    train_observed(train_set, val_set, model, cfg, stream, &mut |_, _| {})
}

/// As [`train`], calling `observe` after every epoch with that epoch's log and parameters.
pub fn train_observed(
    train_set: &MilDataset,
    val_set: &MilDataset,
    model: &MivaeConfig,
    cfg: &TrainConfig,
    stream: Stream,
    observe: &mut dyn FnMut(&EpochLog, &MivaeParams),
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    model.validate()?;
    for ds in [train_set, val_set] {
        if ds.dim() != model.dim {
            return Err(ModelError::Dimension { what: "feature", expected: model.dim, found: ds.dim() }.into());
        }
    }
    let mut params = MivaeParams::init(model, &mut stream.rng("init"))?;
    let mut opt = AdamWState::new(cfg.adamw(), &params.store);
    let mut rng = stream.rng("train");
    let val_labels: Vec<bool> = val_set.bags().iter().map(|b| b.label).collect();

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(MivaeParams, f64, f64, usize, AdamWState, Rng)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        rng.shuffle(&mut order);
        let mut train_total = 0.0;
        for chunk in order.chunks(cfg.batch_bags) {
            let bags: Vec<&Bag> = chunk.iter().map(|&i| &train_set.bags()[i]).collect();
            let numeric = |source: ModelError| HarnessError::Numeric {
                epoch,
                bags: bags.iter().map(|b| b.id.clone()).collect(),
                source,
            };
            let batch = Batch::new(&bags, model.dim)?;
            let noise = draw_noise(model, &bags, &mut rng);
            let mut tape = Tape::new();
            let g = build_loss(&mut tape, &params, &batch, &noise).map_err(numeric)?;
            train_total += tape.value(g.per_bag).sum();
            let grads = tape.backward(g.loss).map_err(|e| numeric(e.into()))?;
            opt.step(&mut params.store, &grads).map_err(|e| numeric(e.into()))?;
        }
        // same validation noise every epoch so losses are comparable
        let val_loss = dataset_loss(&params, val_set, cfg.batch_bags, &mut stream.rng("validation-noise"))
            .map_err(|source| HarnessError::Numeric { epoch, bags: Vec::new(), source })?;
        let (probs, _) = predict_dataset(&params, val_set)?;
        let val_accuracy = bag_accuracy(&probs, &val_labels, DEFAULT_THRESHOLD)?;
        logs.push(EpochLog {
            epoch,
            train_loss: train_total / train_set.len() as f64,
            val_loss,
            val_accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        observe(logs.last().expect("just pushed"), &params);
        let losses: Vec<f64> = logs.iter().map(|l| l.val_loss).collect();
        if select_epoch(&losses) == Some(epoch - 1) {
            best = Some((params.clone(), val_loss, val_accuracy, epoch, opt.clone(), rng.clone()));
        }
    }
    let (params, best_val_loss, best_val_accuracy, best_epoch, optimizer, rng) = best.expect("validation loss is finite");
    Ok(TrainOutcome { params, best_epoch, best_val_loss, best_val_accuracy, logs, optimizer, rng })
}
