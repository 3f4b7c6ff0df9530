//! Optimisation, evaluation metrics and cross-validation protocols.

mod adam;
mod config;
mod metrics;
mod protocol;
mod trainer;

pub use adam::{Adam, AdamHyper};
pub use config::{class_weights, ClassWeightMode, TrainConfig};
pub use metrics::{confusion_matrix, evaluate, predict, ClassScores, Metrics};
pub use protocol::{aggregate, fit_config, prepare_fold, run_fold, run_protocol, FoldReport, Preprocessing, PreparedFold, ProtocolReport, Summary};
pub use trainer::{train, EpochRecord, StopReason, TrainReport};

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::numeric::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("class {class} has no training trials")]
    MissingClass { class: usize },
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

impl TrainError {
    /// True for aborts caused by NaN or infinite values.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient { .. }
                | TrainError::NonFiniteLoss { .. }
                | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}
