//! Command implementations. Each writes its manifest before doing any work.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use mivae::data::{
    format_f64, load_bag_csv, make_fold_plan, sample_synthetic, save_bag_csv, stratified_holdout, MilDataset,
    SyntheticSpec, VALIDATION_FRACTION,
};
use mivae::harness::{
    grid_search, instance_scores, predict_dataset, prepare_splits, run_plan, save_epoch_logs, train,
    write_instance_scores, CellRecord, CvResult, ExperimentConfig, GridConfig, GridResult, ModelSection, Stream,
};
use mivae::model::{Checkpoint, MivaeConfig};

use crate::manifest::{Invocation, RunManifest};
use crate::CliError;

pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn load_data(path: &Path) -> Result<MilDataset, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("{}: no such file", path.display())));
    }
    Ok(load_bag_csv(path)?)
}

pub fn load_spec(path: &Path) -> Result<SyntheticSpec, CliError> {
    Ok(SyntheticSpec::from_toml_str(&read_text(path)?)?)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig::from_toml_str(&read_text(path)?)?)
}

pub fn load_grid(path: &Path) -> Result<GridConfig, CliError> {
    Ok(GridConfig::from_toml_str(&read_text(path)?)?)
}

/// Runs a resolved invocation; returns the line for standard output.
pub fn execute(manifest: &RunManifest) -> Result<String, CliError> {
    manifest.write()?;
    match &manifest.invocation {
        Invocation::Synth { spec, seed, out } => synth(spec, *seed, out),
        Invocation::Train { data, config, out } => train_cmd(data, config, out),
        Invocation::Cv { data, config, repeats, folds, jobs, out } => cv(data, config, *repeats, *folds, *jobs, out),
        Invocation::Gridsearch { data, grid, jobs, out } => gridsearch(data, grid, *jobs, out),
        Invocation::Predict { checkpoint, data, out } => predict(checkpoint, data, out),
    }
}

fn synth(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<String, CliError> {
    let ds = sample_synthetic(spec, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_bag_csv(&ds, out)?;
    Ok(format!(
        "wrote {} bags ({} positive), {} instances to {}",
        ds.len(),
        ds.num_positive(),
        ds.num_instances(),
        out.display()
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub final_val_loss: f64,
    pub final_val_accuracy: f64,
    pub train_bags: usize,
    pub validation_bags: usize,
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn check_finite(values: &[f64], what: &str) -> Result<(), CliError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("non-finite {what}")))
    }
}

fn train_cmd(data: &Path, config: &ExperimentConfig, out: &Path) -> Result<String, CliError> {
    let ds = load_data(data)?;
    let model = config.model.resolve(ds.dim())?;
    let stream = Stream::new(config.train.seed);
    let labelled: Vec<(String, bool)> = ds.bags().iter().map(|b| (b.id.clone(), b.label)).collect();
    let (train_ids, val_ids) = stratified_holdout(&mut stream.rng("validation"), &labelled, VALIDATION_FRACTION);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(CliError::Data(format!("{} bags are too few for a validation split", ds.len())));
    }
    let train_raw = ds.subset("train", &train_ids)?;
    let val_raw = ds.subset("validation", &val_ids)?;
    let (train_set, rest, stats) = prepare_splits(&train_raw, &[&val_raw], model.likelihood)?;
    let outcome = train(&train_set, &rest[0], &model, &config.train, stream)?;
    check_finite(&[outcome.best_val_loss, outcome.best_val_accuracy], "validation metrics")?;

    ensure_dir(out)?;
    let mut ck = Checkpoint::new(&outcome.params).with_optimizer(&outcome.optimizer).with_rng(&outcome.rng);
    if let Some(s) = &stats {
        ck = ck.with_standardizer(s);
    }
    ck.metadata.insert("best_epoch".into(), outcome.best_epoch.to_string());
    ck.metadata.insert("data".into(), data.display().to_string());
    ck.save(out.join("checkpoint.json"))?;
    save_epoch_logs(&outcome.logs, out.join("epochs.csv"))?;
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        final_val_loss: outcome.best_val_loss,
        final_val_accuracy: outcome.best_val_accuracy,
        train_bags: train_set.len(),
        validation_bags: rest[0].len(),
    };
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(format!(
        "best epoch {} of {}: validation loss {}, validation accuracy {:.4}",
        summary.best_epoch,
        config.train.epochs,
        format_f64(summary.final_val_loss),
        summary.final_val_accuracy
    ))
}

fn save_results(result: &CvResult, out: &Path) -> Result<(), CliError> {
    write_file(&out.join("results.json"), result.to_json())
}

fn cv(data: &Path, config: &ExperimentConfig, repeats: usize, folds: usize, jobs: usize, out: &Path) -> Result<String, CliError> {
    let ds = load_data(data)?;
    let model = config.model.resolve(ds.dim())?;
    let plan = make_fold_plan(&ds, folds, repeats, config.train.seed)?;
    ensure_dir(out)?;
    plan.save(out.join("folds.csv"))?;
    let done: Mutex<Vec<CellRecord>> = Mutex::new(Vec::new());
    let progress = |c: &CellRecord| {
        match (&c.accuracy, &c.error) {
            (Some(a), _) => eprintln!("repeat {} fold {}: accuracy {a:.4}", c.repeat, c.fold),
            (_, Some(e)) => eprintln!("repeat {} fold {}: failed: {e}", c.repeat, c.fold),
            _ => {}
        }
        let mut cells = done.lock().expect("progress lock");
        cells.push(c.clone());
        let partial = partial_result(&ds, &model, config, &plan, &cells);
        // best effort; the final write below reports errors
        let _ = std::fs::write(out.join("results.json"), partial.to_json());
    };
    let result = run_plan(&ds, &plan, &model, &config.train, jobs.max(1), &progress)?;
    save_results(&result, out)?;
    if result.failed {
        return Err(CliError::Numeric(format!(
            "{} of {} cells failed; partial results in {}",
            result.summary.failed_cells,
            result.cells.len(),
            out.join("results.json").display()
        )));
    }
    let mut finite: Vec<f64> = Vec::new();
    for s in [&result.summary.accuracy, &result.summary.aucpr].into_iter().flatten() {
        finite.extend([s.mean, s.std_cells, s.std_repeat_means]);
    }
    check_finite(&finite, "summary")?;
    Ok(result.summary_line())
}

fn partial_result(
    ds: &MilDataset,
    model: &MivaeConfig,
    config: &ExperimentConfig,
    plan: &mivae::data::FoldPlan,
    cells: &[CellRecord],
) -> CvResult {
    let mut cells = cells.to_vec();
    cells.sort_by_key(|c| (c.repeat, c.fold));
    let summary = mivae::harness::summarize(&cells);
    CvResult {
        format_version: mivae::harness::RESULTS_FORMAT,
        dataset: ds.name.clone(),
        config_hash: mivae::harness::config_hash(&(model, &config.train, plan.folds, plan.repeats)),
        seed: config.train.seed,
        folds: plan.folds,
        repeats: plan.repeats,
        model: model.clone(),
        train: config.train.clone(),
        failed: true,
        cells,
        summary,
    }
}

pub const GRID_TABLE_COLUMNS: [&str; 11] = [
    "index",
    "hidden_layers",
    "hidden_units",
    "latent_dim",
    "alpha",
    "lr",
    "weight_decay",
    "val_loss",
    "val_accuracy",
    "best_epoch",
    "error",
];

fn write_grid_table(result: &GridResult, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record(GRID_TABLE_COLUMNS).map_err(|e| CliError::Data(e.to_string()))?;
    for r in &result.rows {
        let m = &r.cell.model;
        w.write_record([
            r.cell.index.to_string(),
            m.hidden_layers.to_string(),
            m.hidden_units.to_string(),
            m.bag_latent_dim.to_string(),
            format_f64(m.alpha),
            format_f64(r.cell.lr),
            format_f64(r.cell.weight_decay),
            format_f64(r.val_loss),
            format_f64(r.val_accuracy),
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn gridsearch(data: &Path, grid: &GridConfig, jobs: usize, out: &Path) -> Result<String, CliError> {
    let ds = load_data(data)?;
    let base = grid.model.resolve(ds.dim())?;
    let result = grid_search(&ds, &base, &grid.grid, &grid.train, jobs.max(1))?;
    ensure_dir(out)?;
    write_grid_table(&result, &out.join("grid.csv"))?;
    write_file(&out.join("grid.json"), serde_json::to_string_pretty(&result).expect("grid serializes"))?;
    let best = result.best_row();
    let best_config = ExperimentConfig::new(ModelSection::from_model(&best.cell.model), result.best_train_config(&grid.train));
    write_file(&out.join("best_config.toml"), best_config.to_toml_string())?;
    if !best.val_loss.is_finite() {
        return Err(CliError::Numeric("no grid cell finished with a finite validation loss".into()));
    }
    Ok(format!(
        "{} cells; best #{}: layers {}, units {}, latent {}, alpha {}, lr {}, wd {}, validation loss {}",
        result.rows.len(),
        best.cell.index,
        best.cell.model.hidden_layers,
        best.cell.model.hidden_units,
        best.cell.model.bag_latent_dim,
        format_f64(best.cell.model.alpha),
        format_f64(best.cell.lr),
        format_f64(best.cell.weight_decay),
        format_f64(best.val_loss)
    ))
}

pub const BAG_PREDICTION_COLUMNS: [&str; 3] = ["bag_id", "probability", "label"];

fn predict(checkpoint: &Path, data: &Path, out: &Path) -> Result<String, CliError> {
    let ck = Checkpoint::load(checkpoint).map_err(|e| CliError::Config(e.to_string()))?;
    let raw = load_data(data)?;
    ck.check_data_dim(raw.dim())?;
    let params = ck.params()?;
    let ds = match &ck.standardizer {
        Some(s) => s.transform(&raw)?,
        None => raw,
    };
    let (probs, _) = predict_dataset(&params, &ds)?;
    let rows = instance_scores(&params, &ds)?;
    check_finite(&probs, "bag probability")?;
    check_finite(&rows.iter().map(|r| r.score).collect::<Vec<_>>(), "instance score")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let file = std::fs::File::create(out).map_err(|e| CliError::io(out, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(BAG_PREDICTION_COLUMNS).map_err(|e| CliError::Data(e.to_string()))?;
    for (bag, p) in ds.bags().iter().zip(&probs) {
        w.write_record([bag.id.clone(), format_f64(*p), u8::from(bag.label).to_string()])
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(out, e))?;
    let inst_path = instance_path(out);
    let file = std::fs::File::create(&inst_path).map_err(|e| CliError::io(&inst_path, e))?;
    let mut buf = std::io::BufWriter::new(file);
    write_instance_scores(&rows, &mut buf)?;
    buf.flush().map_err(|e| CliError::io(&inst_path, e))?;
    Ok(format!("predicted {} bags, {} instances into {} and {}", ds.len(), rows.len(), out.display(), inst_path.display()))
}

/// Instance scores go beside the bag predictions as `<stem>_instances.csv`.
pub fn instance_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
    out.with_file_name(format!("{stem}_instances.csv"))
}

/// Files whose bytes must match between a run and its replay.
pub fn reproducible_outputs(inv: &Invocation) -> Vec<PathBuf> {
    let out = inv.out();
    match inv {
        Invocation::Synth { .. } => vec![out.to_path_buf()],
        Invocation::Predict { .. } => vec![out.to_path_buf(), instance_path(out)],
        Invocation::Train { .. } => vec![out.join("summary.json"), out.join("checkpoint.json")],
        Invocation::Cv { .. } => vec![out.join("results.json"), out.join("folds.csv")],
        Invocation::Gridsearch { .. } => vec![out.join("grid.csv"), out.join("best_config.toml")],
    }
}

/// Re-runs a manifest into `out` and, with `check`, compares outputs byte for byte.
pub fn replay(manifest_path: &Path, out: &Path, check: bool) -> Result<String, CliError> {
    let original = RunManifest::load(manifest_path)?;
    let again = RunManifest { invocation: original.invocation.clone().with_out(absolute(out)), ..original.clone() };
    let line = execute(&again)?;
    if !check {
        return Ok(line);
    }
    let before = reproducible_outputs(&original.invocation);
    let after = reproducible_outputs(&again.invocation);
    for (a, b) in before.iter().zip(&after) {
        let x = std::fs::read(a).map_err(|e| CliError::io(a, e))?;
        let y = std::fs::read(b).map_err(|e| CliError::io(b, e))?;
        if x != y {
            return Err(CliError::Mismatch(format!("{} differs from {}", b.display(), a.display())));
        }
    }
    Ok(format!("{line}\nreplay matches {} output files", before.len()))
}
