use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in input to {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("cyclic prefix of {cp_len} samples is shorter than channel memory {memory}")]
    CyclicPrefixTooShort { cp_len: usize, memory: usize },

    #[error("DoA estimation failed: {0}")]
    Estimation(String),

    #[error("step size {mu} outside stability range (must be below {bound})")]
    UnstableStepSize { mu: f64, bound: f64 },

    #[error("constrained LMS did not converge after {iters} iterations (constraint residual {residual:e})")]
    NotConverged { iters: usize, residual: f64 },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub(crate) fn ensure_len(op: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            op,
            expected,
            actual,
        })
    }
}
