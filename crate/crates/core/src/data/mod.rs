//! Trials, their on-disk format, synthetic generation, preprocessing and
//! evaluation splits.

mod align;
mod eegb;
mod epochs;
mod rpsd;
mod split;
mod synth;

pub use align::{euclidean_align, mean_covariance};
pub use eegb::{decode_epochs, encode_epochs, load_epochs, save_epochs};
pub use epochs::EpochSet;
pub use rpsd::{band_powers, relative_band_powers, rpsd_features, RpsdParams, BANDS};
pub use split::{make_split, Fold, Protocol, SplitPlan};
pub use synth::{synth_generate, ClassRecipe, SynthSpec};

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic: not an EEGB file")]
    BadMagic,
    #[error("unsupported EEGB version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("zero extent: {0}")]
    ZeroExtent(&'static str),
    #[error("invalid sampling rate {0}")]
    InvalidSampleRate(f64),
    #[error("trial {trial}: label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { trial: usize, label: usize, n_classes: usize },
    #[error("inconsistent epoch set: {0}")]
    Inconsistent(String),
    #[error("subject {subject}: mean covariance is not positive definite")]
    NotPositiveDefinite { subject: usize },
    #[error("subject {subject} has {found} trials, at least {needed} required")]
    TooFewTrials { subject: usize, found: usize, needed: usize },
    #[error("window of {window} samples exceeds length {length}")]
    WindowTooLong { window: usize, length: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
