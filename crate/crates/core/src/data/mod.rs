//! Multi-instance datasets: the bag CSV format, standardization, fold plans
//! and a synthetic sampler.

mod bag;
mod csv_format;
mod folds;
mod standardize;
mod synth;

use std::path::Path;

pub use bag::{Bag, MilDataset};
pub use csv_format::{format_f64, load_bag_csv, read_bag_csv, save_bag_csv, write_bag_csv, FIXED_COLUMNS};
pub use folds::{make_fold_plan, stratified_holdout, FoldCell, FoldPlan, VALIDATION_FRACTION};
pub use standardize::{standardize, Standardizer, MIN_STD};
pub use synth::{sample_synthetic, SyntheticSpec, MAX_DRAWS};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    Ragged { line: u64, expected: usize, found: usize },
    #[error("bag {bag_id}: label on line {line} disagrees with line {first_line}")]
    InconsistentLabel { bag_id: String, line: u64, first_line: u64 },
    #[error("bag {bag_id}: {reason}")]
    InvalidBag { bag_id: String, reason: String },
    #[error("dataset {0} is empty")]
    Empty(String),
    #[error("unknown bag id {0}")]
    UnknownBag(String),
    #[error("expected feature dimension {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("configuration: {0}")]
    Config(String),
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
    #[error("csv: {0}")]
    Csv(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn csv(e: csv::Error) -> Self {
        DataError::Csv(e.to_string())
    }
}
