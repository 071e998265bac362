use mivae::data::DataError;
use mivae::harness::HarnessError;
use mivae::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("replay mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io { .. } => 1,
            CliError::Mismatch(_) => 5,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) | DataError::Infeasible(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } | ModelError::Diff(_) => CliError::Numeric(e.to_string()),
            ModelError::EmptyBatch | ModelError::EmptyBag(_) => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Data(d) => d.into(),
            HarnessError::Model(m) => m.into(),
            HarnessError::Numeric { .. } => CliError::Numeric(e.to_string()),
            HarnessError::UndefinedMetric(_) | HarnessError::Format(_) => CliError::Data(e.to_string()),
            HarnessError::Config(_) => CliError::Config(e.to_string()),
            HarnessError::Io { path, source } => CliError::Io { path, source },
        }
    }
}
