//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

use crate::train::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (after jitter up to {max_jitter:e})")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("expected a square matrix, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("requested {k} singular components of a {rows}x{cols} matrix")]
    KTooLarge { k: usize, rows: usize, cols: usize },

    #[error("refusing to materialise a {rows}x{cols} dense product")]
    DimTooLarge { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("forward trace does not match the network: {0}")]
    TraceMismatch(String),

    #[error("label {label} out of range for {n_classes} classes")]
    BadLabel { label: usize, n_classes: usize },

    #[error("training diverged at step {step} (non-finite loss)")]
    Divergence {
        step: usize,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error("parameter dimension {dim} exceeds the dense limit {limit}")]
    TooLarge { dim: usize, limit: usize },

    #[error("posterior layout does not match the network: {0}")]
    LayoutMismatch(String),

    #[error("Laplace bridge produced a non-positive concentration for class {class}")]
    NonPositiveAlpha { class: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("dataset split '{0}' may not be used for tuning")]
    SplitLeak(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: label {label} out of range for {n_classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        line: usize,
        label: usize,
        n_classes: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
