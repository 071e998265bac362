//! Stratified repeated K-fold plans with a nested validation split.
//!
//! Within one repeat, positive bags are shuffled and dealt cyclically to
//! folds, then negative bags continue the same cycle. Every fold therefore
//! holds `ceil` or `floor` of `m/K` bags and of `P/K` positives. The
//! validation split takes 10% of each fold's training bags, stratified the
//! same way.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, MilDataset};
use crate::diff::Rng;

pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldCell {
    pub repeat: usize,
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub repeats: usize,
    pub folds: usize,
    pub cells: Vec<FoldCell>,
}

fn split_stratified(rng: &mut Rng, positives: &[String], negatives: &[String]) -> Vec<String> {
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    pos.extend(neg);
    pos
}

/// Splits `ids` (with labels) into `(rest, held_out)` where `held_out` has
/// `round(fraction * n)` bags (at least one when `n >= 2`) with the positive
/// count rounded from the overall proportion.
pub fn stratified_holdout(
    rng: &mut Rng,
    ids: &[(String, bool)],
    fraction: f64,
) -> (Vec<String>, Vec<String>) {
    let n = ids.len();
    let mut n_hold = (fraction * n as f64).round() as usize;
    if n >= 2 {
        n_hold = n_hold.clamp(1, n - 1);
    } else {
        n_hold = 0;
    }
    let mut pos: Vec<String> = ids.iter().filter(|(_, l)| *l).map(|(i, _)| i.clone()).collect();
    let mut neg: Vec<String> = ids.iter().filter(|(_, l)| !*l).map(|(i, _)| i.clone()).collect();
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let hold_pos = ((n_hold as f64) * pos.len() as f64 / n.max(1) as f64).round() as usize;
    let hold_pos = hold_pos.min(pos.len()).max(n_hold.saturating_sub(neg.len()));
    let hold_neg = n_hold - hold_pos;
    let mut held: Vec<String> = pos[..hold_pos].to_vec();
    held.extend_from_slice(&neg[..hold_neg]);
    let mut rest: Vec<String> = pos[hold_pos..].to_vec();
    rest.extend_from_slice(&neg[hold_neg..]);
    (rest, held)
}

pub fn make_fold_plan(dataset: &MilDataset, folds: usize, repeats: usize, seed: u64) -> Result<FoldPlan, DataError> {
    let m = dataset.len();
    if folds < 2 || folds > m {
        return Err(DataError::Config(format!("cannot make {folds} folds from {m} bags")));
    }
    if repeats == 0 {
        return Err(DataError::Config("repeats must be at least 1".into()));
    }
    let positives: Vec<String> = dataset.bags().iter().filter(|b| b.label).map(|b| b.id.clone()).collect();
    let negatives: Vec<String> = dataset.bags().iter().filter(|b| !b.label).map(|b| b.id.clone()).collect();
    let label_of: std::collections::HashMap<&str, bool> =
        dataset.bags().iter().map(|b| (b.id.as_str(), b.label)).collect();

    let mut cells = Vec::with_capacity(folds * repeats);
    for r in 0..repeats {
        let mut rng = Rng::derived(seed, "folds", r as u64, 0);
        let order = split_stratified(&mut rng, &positives, &negatives);
        let mut assignment = vec![Vec::new(); folds];
        for (i, id) in order.into_iter().enumerate() {
            assignment[i % folds].push(id);
        }
        for f in 0..folds {
            let test = assignment[f].clone();
            let training: Vec<(String, bool)> = (0..folds)
                .filter(|&g| g != f)
                .flat_map(|g| assignment[g].iter())
                .map(|id| (id.clone(), label_of[id.as_str()]))
                .collect();
            let mut vrng = Rng::derived(seed, "validation", r as u64, f as u64);
            let (train, validation) = stratified_holdout(&mut vrng, &training, VALIDATION_FRACTION);
            cells.push(FoldCell { repeat: r, fold: f, train, validation, test });
        }
    }
    Ok(FoldPlan { repeats, folds, cells })
}

impl FoldPlan {
    pub fn cell(&self, repeat: usize, fold: usize) -> Option<&FoldCell> {
        self.cells.iter().find(|c| c.repeat == repeat && c.fold == fold)
    }

    /// `repeat,fold,split,bag_id` rows, one per bag per split.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["repeat", "fold", "split", "bag_id"]).map_err(DataError::csv)?;
        for c in &self.cells {
            for (split, ids) in [("train", &c.train), ("validation", &c.validation), ("test", &c.test)] {
                for id in ids {
                    out.write_record([c.repeat.to_string().as_str(), c.fold.to_string().as_str(), split, id.as_str()])
                        .map_err(DataError::csv)?;
                }
            }
        }
        out.flush().map_err(|e| DataError::Io { path: String::new(), source: e })?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<FoldPlan, DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| DataError::Parse { line: 1, message: e.to_string() })?;
        if header.iter().collect::<Vec<_>>() != ["repeat", "fold", "split", "bag_id"] {
            return Err(DataError::Parse { line: 1, message: "expected header repeat,fold,split,bag_id".into() });
        }
        let mut cells: Vec<FoldCell> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| DataError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let num = |i: usize| -> Result<usize, DataError> {
                rec[i].parse().map_err(|_| DataError::Parse { line, message: format!("bad integer {:?}", &rec[i]) })
            };
            let (repeat, fold) = (num(0)?, num(1)?);
            let idx = match cells.iter().position(|c| c.repeat == repeat && c.fold == fold) {
                Some(i) => i,
                None => {
                    cells.push(FoldCell { repeat, fold, train: vec![], validation: vec![], test: vec![] });
                    cells.len() - 1
                }
            };
            let cell = &mut cells[idx];
            let id = rec[3].to_string();
            match &rec[2] {
                "train" => cell.train.push(id),
                "validation" => cell.validation.push(id),
                "test" => cell.test.push(id),
                other => return Err(DataError::Parse { line, message: format!("unknown split {other:?}") }),
            }
        }
        let repeats = cells.iter().map(|c| c.repeat + 1).max().unwrap_or(0);
        let folds = cells.iter().map(|c| c.fold + 1).max().unwrap_or(0);
        if cells.len() != repeats.saturating_mul(folds) {
            return Err(DataError::Parse { line: 0, message: "fold plan does not cover every (repeat, fold) cell".into() });
        }
        cells.sort_by_key(|c| (c.repeat, c.fold));
        Ok(FoldPlan { repeats, folds, cells })
    }
}
