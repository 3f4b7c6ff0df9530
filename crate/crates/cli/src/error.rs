use std::fmt;

use lidsn::data::DataError;
use lidsn::model::{ModelError, SnapshotError};
use lidsn::numeric::TensorError;
use lidsn::training::TrainError;

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error[usage]: {m}"),
            CliError::Data(m) => write!(f, "error[data]: {m}"),
            CliError::Numeric(m) => write!(f, "error[numeric]: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            ModelError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SnapshotError> for CliError {
    fn from(e: SnapshotError) -> Self {
        match e {
            SnapshotError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            TrainError::InvalidConfig(m) => CliError::Usage(m),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}
