//! The dual-stream network: configuration, parameters, forward pass and
//! the tooling built on it.

mod check;
mod config;
mod cost;
mod forward;
mod params;
mod saliency;
mod snapshot;
pub mod viz;

pub use check::{block_grad_check, random_tiny_config, Block};
pub use config::{FusionMode, IntegrationMode, ModelConfig};
pub use cost::{count_params_flops, Cost};
pub use forward::{Ctx, ForwardTrace, LayerTrace, LiDsn, Mode, SacmOut, TcamOut, BN_EPS, LN_EPS};
pub use params::{param_specs, Init, Kind, ParamSpec, Params};
pub use saliency::saliency;
pub use snapshot::{load_snapshot, read_snapshot, save_snapshot, write_snapshot, SnapshotError};

use thiserror::Error;

use crate::numeric::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("unexpected parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("input shape {found:?} does not match [batch, {}, {}]", expected[1], expected[2])]
    InputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("class index {index} out of range for {n_classes} classes")]
    InvalidClass { index: usize, n_classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
