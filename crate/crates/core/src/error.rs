use thiserror::Error;

use crate::ept::{EptError, Kind, Task};

/// Errors raised by the measure, diagnostic, and calibration routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ept(#[from] EptError),

    #[error("expected a {expected} tensor, got {found}")]
    KindMismatch { expected: Kind, found: Kind },

    #[error("operation requires a {expected} task, got {found}")]
    TaskMismatch { expected: Task, found: Task },

    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("negative probability {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("epochs must be strictly increasing (epoch {current} follows {previous})")]
    EpochOrder { previous: u64, current: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn require_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must be finite and > 0",
        })
    }
}

pub(crate) fn require_non_negative(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must be finite and >= 0",
        })
    }
}
