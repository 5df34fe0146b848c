use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that break its contract
    /// (shape mismatch, out-of-range index, ...).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("batch norm running statistics are uninitialized; run a train step first")]
    UninitializedStats,

    #[error("matrix is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),

    #[error("matrix is not positive semidefinite (pivot {0:e})")]
    NotPsd(f64),

    #[error("class {class} has {available} labeled pixels in the training part, {requested} requested")]
    InsufficientSamples {
        class: u16,
        available: usize,
        requested: usize,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("no labeled pixels")]
    NoLabeledPixels,

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Contract {
        op,
        msg: msg.into(),
    }
}
