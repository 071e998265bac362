//! Cartesian hyperparameter grids ranked by validation loss.

use serde::{Deserialize, Serialize};

use super::train::{train, Stream, TrainConfig};
use super::{prepare_splits, run_pool, HarnessError, ModelSection};
use crate::data::{stratified_holdout, MilDataset, VALIDATION_FRACTION};
use crate::model::MivaeConfig;

pub const GRID_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub hidden_layers: Vec<usize>,
    pub hidden_units: Vec<usize>,
    /// Used for both latent factors.
    pub latent_dims: Vec<usize>,
    pub alphas: Vec<f64>,
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
}

/// A grid file: the axes plus the fixed model and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub schema_version: u32,
    pub grid: GridSpec,
    /// Settings not covered by an axis (likelihood, pooling) come from here.
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

impl GridConfig {
    pub fn new(grid: GridSpec, model: ModelSection, train: TrainConfig) -> Self {
        Self { schema_version: GRID_SCHEMA_VERSION, grid, model, train }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let file: GridConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if file.schema_version != GRID_SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "unsupported grid schema_version {} (expected {GRID_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        file.grid.validate()?;
        file.train.validate()?;
        file.model.resolve(1)?;
        Ok(file)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("grid serializes")
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            hidden_layers: vec![2, 3],
            hidden_units: vec![100, 200],
            latent_dims: vec![16, 32, 64],
            alphas: vec![100.0, 1000.0, 10000.0],
            lrs: vec![1e-3, 1e-4],
            weight_decays: vec![1e-2, 1e-3, 1e-4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub model: MivaeConfig,
    pub lr: f64,
    pub weight_decay: f64,
}

impl GridSpec {
    /// Parses a grid file and keeps only the axes.
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        Ok(GridConfig::from_toml_str(text)?.grid)
    }

    pub fn to_toml_string(&self) -> String {
        GridConfig::new(self.clone(), ModelSection::default(), TrainConfig::default()).to_toml_string()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let axes = [
            ("hidden_layers", self.hidden_layers.len()),
            ("hidden_units", self.hidden_units.len()),
            ("latent_dims", self.latent_dims.len()),
            ("alphas", self.alphas.len()),
            ("lrs", self.lrs.len()),
            ("weight_decays", self.weight_decays.len()),
        ];
        if let Some((name, _)) = axes.iter().find(|a| a.1 == 0) {
            return Err(HarnessError::Config(format!("grid axis {name} is empty")));
        }
        if self.len() > 100_000 {
            return Err(HarnessError::Config(format!("grid has {} cells", self.len())));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.hidden_layers.len()
            * self.hidden_units.len()
            * self.latent_dims.len()
            * self.alphas.len()
            * self.lrs.len()
            * self.weight_decays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All cells; the last axis (weight decay) varies fastest.
    pub fn cells(&self, base: &MivaeConfig) -> Vec<GridCell> {
        let mut out = Vec::with_capacity(self.len());
        for &hidden_layers in &self.hidden_layers {
            for &hidden_units in &self.hidden_units {
                for &latent in &self.latent_dims {
                    for &alpha in &self.alphas {
                        for &lr in &self.lrs {
                            for &weight_decay in &self.weight_decays {
                                let model = MivaeConfig {
                                    hidden_layers,
                                    hidden_units,
                                    bag_latent_dim: latent,
                                    instance_latent_dim: latent,
                                    alpha,
                                    ..base.clone()
                                };
                                out.push(GridCell { index: out.len(), model, lr, weight_decay });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: GridCell,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Index into `rows`.
    pub best: usize,
}

impl GridResult {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }

    pub fn best_train_config(&self, base: &TrainConfig) -> TrainConfig {
        let c = &self.best_row().cell;
        TrainConfig { lr: c.lr, weight_decay: c.weight_decay, ..base.clone() }
    }
}

/// Lowest validation loss, then highest validation accuracy, then earliest cell.
pub fn rank_best(rows: &[GridRow]) -> Option<usize> {
    let key = |r: &GridRow| (if r.val_loss.is_nan() { f64::INFINITY } else { r.val_loss }, r.val_accuracy);
    (0..rows.len()).reduce(|best, i| {
        let (bl, ba) = key(&rows[best]);
        let (l, a) = key(&rows[i]);
        if l < bl || (l == bl && a > ba) {
            i
        } else {
            best
        }
    })
}

/// Trains every cell on a stratified 90/10 split of `dev` and ranks them.
pub fn grid_search(
    dev: &MilDataset,
    base: &MivaeConfig,
    grid: &GridSpec,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<GridResult, HarnessError> {
    grid.validate()?;
    cfg.validate()?;
    let labelled: Vec<(String, bool)> = dev.bags().iter().map(|b| (b.id.clone(), b.label)).collect();
    let stream = Stream::new(cfg.seed);
    let (train_ids, val_ids) = stratified_holdout(&mut stream.rng("grid-validation"), &labelled, VALIDATION_FRACTION);
    let train_raw = dev.subset(format!("{}-train", dev.name), &train_ids)?;
    let val_raw = dev.subset(format!("{}-validation", dev.name), &val_ids)?;
    let cells = grid.cells(base);
    let rows = run_pool(jobs, &cells, |cell| {
        let run = || -> Result<_, HarnessError> {
            let (train_set, rest, _) = prepare_splits(&train_raw, &[&val_raw], cell.model.likelihood)?;
            let tc = TrainConfig { lr: cell.lr, weight_decay: cell.weight_decay, ..cfg.clone() };
            train(&train_set, &rest[0], &cell.model, &tc, Stream { fold: cell.index as u64, ..stream })
        };
        match run() {
            Ok(out) => GridRow {
                cell: cell.clone(),
                val_loss: out.best_val_loss,
                val_accuracy: out.best_val_accuracy,
                best_epoch: Some(out.best_epoch),
                error: None,
            },
            Err(e) => GridRow {
                cell: cell.clone(),
                val_loss: f64::INFINITY,
                val_accuracy: 0.0,
                best_epoch: None,
                error: Some(e.to_string()),
            },
        }
    })?;
    let best = rank_best(&rows).expect("grid is not empty");
    Ok(GridResult { rows, best })
}
