//! Repeated stratified K-fold cross-validation.

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_bag_accuracy, evaluate_instance_aucpr, DEFAULT_THRESHOLD};
use super::train::{train, Stream, TrainConfig};
use super::{config_hash, prepare_splits, run_pool, HarnessError};
use crate::data::{make_fold_plan, FoldCell, FoldPlan, MilDataset};
use crate::model::MivaeConfig;

pub const RESULTS_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub repeat: usize,
    pub fold: usize,
    pub status: CellStatus,
    pub accuracy: Option<f64>,
    pub aucpr: Option<f64>,
    pub selected_epoch: Option<usize>,
    pub val_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over all cells.
    pub std_cells: f64,
    /// Population standard deviation of the per-repeat means.
    pub std_repeat_means: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub accuracy: Option<MeanStd>,
    pub aucpr: Option<MeanStd>,
    pub failed_cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub format_version: u32,
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub folds: usize,
    pub repeats: usize,
    pub model: MivaeConfig,
    pub train: TrainConfig,
    pub cells: Vec<CellRecord>,
    pub summary: CvSummary,
    pub failed: bool,
}

impl CvResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    /// One-line human summary.
    pub fn summary_line(&self) -> String {
        let mut out = format!("{}: {} x {}-fold CV", self.dataset, self.repeats, self.folds);
        if let Some(a) = &self.summary.accuracy {
            out += &format!(
                ", accuracy {:.4} ± {:.4} (repeat means ± {:.4})",
                a.mean, a.std_cells, a.std_repeat_means
            );
        }
        if let Some(a) = &self.summary.aucpr {
            out += &format!(", AUC-PR {:.4} ± {:.4} (repeat means ± {:.4})", a.mean, a.std_cells, a.std_repeat_means);
        }
        if self.failed {
            out += &format!(", {} failed cells", self.summary.failed_cells);
        }
        out
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

fn mean_std(pairs: &[(usize, f64)]) -> Option<MeanStd> {
    if pairs.is_empty() {
        return None;
    }
    let values: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut repeats: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    repeats.sort_unstable();
    repeats.dedup();
    let repeat_means: Vec<f64> = repeats
        .iter()
        .map(|r| mean(&pairs.iter().filter(|p| p.0 == *r).map(|p| p.1).collect::<Vec<_>>()))
        .collect();
    Some(MeanStd {
        mean: mean(&values),
        std_cells: population_std(&values),
        std_repeat_means: population_std(&repeat_means),
        count: values.len(),
    })
}

/// Summary statistics from per-cell records only.
pub fn summarize(cells: &[CellRecord]) -> CvSummary {
    let acc: Vec<_> = cells.iter().filter_map(|c| c.accuracy.map(|a| (c.repeat, a))).collect();
    let ap: Vec<_> = cells.iter().filter_map(|c| c.aucpr.map(|a| (c.repeat, a))).collect();
    CvSummary {
        accuracy: mean_std(&acc),
        aucpr: mean_std(&ap),
        failed_cells: cells.iter().filter(|c| c.status == CellStatus::Failed).count(),
    }
}

fn run_cell(
    dataset: &MilDataset,
    cell: &FoldCell,
    model: &MivaeConfig,
    cfg: &TrainConfig,
    with_aucpr: bool,
) -> Result<CellRecord, HarnessError> {
    let tag = |s: &str| format!("{}-r{}-f{}-{s}", dataset.name, cell.repeat, cell.fold);
    let train_raw = dataset.subset(tag("train"), &cell.train)?;
    let val_raw = dataset.subset(tag("validation"), &cell.validation)?;
    let test_raw = dataset.subset(tag("test"), &cell.test)?;
    let (train_set, rest, _) = prepare_splits(&train_raw, &[&val_raw, &test_raw], model.likelihood)?;
    let stream = Stream { seed: cfg.seed, repeat: cell.repeat as u64, fold: cell.fold as u64 };
    let out = train(&train_set, &rest[0], model, cfg, stream)?;
    let accuracy = evaluate_bag_accuracy(&out.params, &rest[1], DEFAULT_THRESHOLD)?;
    let aucpr = if with_aucpr && rest[1].bags().iter().any(|b| b.label) {
        Some(evaluate_instance_aucpr(&out.params, &rest[1])?)
    } else {
        None
    };
    Ok(CellRecord {
        repeat: cell.repeat,
        fold: cell.fold,
        status: CellStatus::Ok,
        accuracy: Some(accuracy),
        aucpr,
        selected_epoch: Some(out.best_epoch),
        val_loss: Some(out.best_val_loss),
        error: None,
    })
}

/// Runs every cell of a fold plan on up to `jobs` threads. Cell failures are
/// recorded, not propagated; `on_cell` sees each record as it completes.
pub fn run_plan(
    dataset: &MilDataset,
    plan: &FoldPlan,
    model: &MivaeConfig,
    cfg: &TrainConfig,
    jobs: usize,
    on_cell: &(dyn Fn(&CellRecord) + Sync),
) -> Result<CvResult, HarnessError> {
    cfg.validate()?;
    model.validate()?;
    let with_aucpr = dataset.has_instance_labels();
    let cells = run_pool(jobs, &plan.cells, |cell| {
        let record = run_cell(dataset, cell, model, cfg, with_aucpr).unwrap_or_else(|e| CellRecord {
            repeat: cell.repeat,
            fold: cell.fold,
            status: CellStatus::Failed,
            accuracy: None,
            aucpr: None,
            selected_epoch: None,
            val_loss: None,
            error: Some(e.to_string()),
        });
        on_cell(&record);
        record
    })?;
    let summary = summarize(&cells);
    Ok(CvResult {
        format_version: RESULTS_FORMAT,
        dataset: dataset.name.clone(),
        config_hash: config_hash(&(model, cfg, plan.folds, plan.repeats)),
        seed: cfg.seed,
        folds: plan.folds,
        repeats: plan.repeats,
        model: model.clone(),
        train: cfg.clone(),
        failed: summary.failed_cells > 0,
        cells,
        summary,
    })
}

pub fn run_repeated_cv(
    dataset: &MilDataset,
    model: &MivaeConfig,
    cfg: &TrainConfig,
    folds: usize,
    repeats: usize,
    jobs: usize,
) -> Result<CvResult, HarnessError> {
    let plan = make_fold_plan(dataset, folds, repeats, cfg.seed)?;
    run_plan(dataset, &plan, model, cfg, jobs, &|_| {})
}
