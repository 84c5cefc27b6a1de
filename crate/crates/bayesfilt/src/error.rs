//! Error type shared by every filter and model operation.

use thiserror::Error;

/// Failures surfaced by model construction, filtering and scoring.
#[derive(Debug, Error)]
pub enum FilterError {
    /// A vector or matrix had the wrong shape for the operation.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    /// Invalid configuration (non-positive-definite covariance, bad particle
    /// count, unknown coefficient name, inconsistent partition, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numeric operation produced a non-finite value or an indefinite
    /// matrix beyond the conditioning floor.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Every particle weight underflowed to zero: the measurement is
    /// irreconcilable with the predicted ensemble.
    #[error("degenerate likelihood: {0}")]
    DegenerateLikelihood(String),

    /// A caller broke an API contract (e.g. supplied a proposal density that
    /// is zero at a particle it claims to have drawn from it).
    #[error("contract violation: {0}")]
    Contract(String),

    /// I/O or serialization failure while reading or writing run artifacts.
    #[error("io failure: {0}")]
    Io(String),
}

impl FilterError {
    /// Shorthand for a dimension-mismatch error.
    pub fn dims(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Self::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }

    /// Attach a step index to an error bubbling out of a filter recursion.
    pub fn at_step(self, step: usize) -> Self {
        self.tagged(&format!("step {step}"))
    }

    /// Prefix a context tag (step, particle or component index) onto the
    /// message of a runtime error; structural errors pass through untouched.
    pub fn tagged(self, tag: &str) -> Self {
        match self {
            Self::Numerical(msg) => Self::Numerical(format!("{tag}: {msg}")),
            Self::DegenerateLikelihood(msg) => {
                Self::DegenerateLikelihood(format!("{tag}: {msg}"))
            }
            other => other,
        }
    }
}

impl From<std::io::Error> for FilterError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for FilterError {
    fn from(e: csv::Error) -> Self {
        Self::Io(e.to_string())
    }
}
