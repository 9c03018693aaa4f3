use thiserror::Error;

/// Errors raised while building or evaluating the market and control models.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("invalid {what}: {reason}")]
    InvalidParameter { what: &'static str, reason: String },
    #[error("{what} is not symmetric positive definite")]
    NotPositiveDefinite { what: &'static str },
    #[error("insufficient history: need {needed} observations, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
}

impl ModelError {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        ModelError::InvalidParameter {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<(), Self> {
        if expected == found {
            Ok(())
        } else {
            Err(ModelError::DimensionMismatch {
                what,
                expected,
                found,
            })
        }
    }
}

/// Failure modes of the dense QP solver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("problem dimensions are inconsistent: {0}")]
    Dimension(String),
    #[error("quadratic term is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible (row {row})")]
    Infeasible { row: usize },
    #[error("iteration limit {limit} exceeded")]
    IterationLimit { limit: usize },
}

/// Errors from one receding-horizon control step.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("QP solve failed: {0}")]
    Solver(#[from] QpError),
}
