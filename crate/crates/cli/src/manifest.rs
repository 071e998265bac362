//! Run manifests: everything needed to repeat a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mivae::data::SyntheticSpec;
use mivae::harness::{ExperimentConfig, GridConfig};

use crate::CliError;

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
pub enum Invocation {
    Synth { spec: SyntheticSpec, seed: u64, out: PathBuf },
    Train { data: PathBuf, config: ExperimentConfig, out: PathBuf },
    Cv { data: PathBuf, config: ExperimentConfig, repeats: usize, folds: usize, jobs: usize, out: PathBuf },
    Gridsearch { data: PathBuf, grid: GridConfig, jobs: usize, out: PathBuf },
    Predict { checkpoint: PathBuf, data: PathBuf, out: PathBuf },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Synth { .. } => "synth",
            Invocation::Train { .. } => "train",
            Invocation::Cv { .. } => "cv",
            Invocation::Gridsearch { .. } => "gridsearch",
            Invocation::Predict { .. } => "predict",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Invocation::Synth { out, .. }
            | Invocation::Train { out, .. }
            | Invocation::Cv { out, .. }
            | Invocation::Gridsearch { out, .. }
            | Invocation::Predict { out, .. } => out,
        }
    }

    pub fn with_out(mut self, new: PathBuf) -> Self {
        match &mut self {
            Invocation::Synth { out, .. }
            | Invocation::Train { out, .. }
            | Invocation::Cv { out, .. }
            | Invocation::Gridsearch { out, .. }
            | Invocation::Predict { out, .. } => *out = new,
        }
        self
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Synth { seed, .. } => Some(*seed),
            Invocation::Predict { .. } => None,
            Invocation::Train { config, .. } | Invocation::Cv { config, .. } => Some(config.train.seed),
            Invocation::Gridsearch { grid, .. } => Some(grid.train.seed),
        }
    }

    /// Commands whose `out` is a single file rather than a directory.
    pub fn writes_file(&self) -> bool {
        matches!(self, Invocation::Synth { .. } | Invocation::Predict { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    /// Config, spec or grid file as given on the command line.
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub invocation: Invocation,
}

impl RunManifest {
    pub fn new(invocation: Invocation, config_path: Option<PathBuf>) -> Self {
        Self {
            format_version: MANIFEST_FORMAT,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_path,
            seed: invocation.seed(),
            invocation,
        }
    }

    /// `<dir>/manifest.json` for directory outputs, `<stem>.manifest.json` beside file outputs.
    pub fn path_for(invocation: &Invocation) -> PathBuf {
        let out = invocation.out();
        if invocation.writes_file() {
            sibling(out, "manifest.json")
        } else {
            out.join("manifest.json")
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let m: RunManifest = serde_json::from_str(text).map_err(|e| CliError::Config(format!("manifest: {e}")))?;
        if m.format_version != MANIFEST_FORMAT {
            return Err(CliError::Config(format!(
                "manifest format {} is not supported (expected {MANIFEST_FORMAT})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self) -> Result<PathBuf, CliError> {
        let path = Self::path_for(&self.invocation);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, self.to_json()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// `dir/stem.suffix` next to `file`, e.g. `preds.csv` -> `preds.manifest.json`.
pub fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    file.with_file_name(format!("{stem}.{suffix}"))
}
