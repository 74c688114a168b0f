//! Error type shared by all laboratory components.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// `t` fell outside the schedule's valid range.
    #[error("t = {t} outside schedule range [{t_min}, {t_max}]")]
    TimeOutOfRange { t: f64, t_min: f64, t_max: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid condition: {0}")]
    InvalidCondition(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A caller violated an operation's contract (mismatched batches,
    /// unshared noise where sharing is required, out-of-range indices, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {context} at index {index}: {value}")]
    NonFinite {
        context: &'static str,
        index: usize,
        value: f64,
    },

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
