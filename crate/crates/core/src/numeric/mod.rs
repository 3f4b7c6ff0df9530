//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod kernels;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use rng::RngStream;
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("function is not deterministic: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
}
