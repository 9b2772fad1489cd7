use thiserror::Error;

use crate::trace::TraceError;

/// Errors raised by the decoding pipeline, the toy model and the harness.
#[derive(Debug, Error)]
pub enum HaveError {
    #[error("context is empty")]
    EmptyContext,

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("estimator layout mismatch: expected {expected} weights, found {found}")]
    LayoutMismatch { expected: usize, found: usize },

    #[error("trace exhausted: requested step {requested} but trace holds {available} snapshots")]
    TraceExhausted { requested: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("snapshot failed validation: {0}")]
    InvalidSnapshot(String),

    #[error(transparent)]
    Trace(#[from] TraceError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HaveError {
    /// True for errors caused by user-supplied input (files, flags, configs)
    /// as opposed to a broken internal invariant.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            HaveError::Config(_)
                | HaveError::Trace(_)
                | HaveError::Io(_)
                | HaveError::TraceExhausted { .. }
                | HaveError::LayoutMismatch { .. }
                | HaveError::InvalidSnapshot(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, HaveError>;
