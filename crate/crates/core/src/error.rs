use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One rejected record from [`crate::data::validate_log`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    pub index: usize,
    pub violation: Violation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonPositiveUrps(f64),
    NegativeWatchTime(f64),
    NonPositiveTimestamp(i64),
    NonFiniteFeature { feature: usize, value: f64 },
    NonFiniteField(&'static str),
    ArityMismatch { expected: usize, found: usize },
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = self.index;
        match &self.violation {
            Violation::NonPositiveUrps(v) => write!(f, "non-positive URPS at index {k} ({v})"),
            Violation::NegativeWatchTime(v) => write!(f, "negative watch time at index {k} ({v})"),
            Violation::NonPositiveTimestamp(v) => {
                write!(f, "non-positive timestamp at index {k} ({v})")
            }
            Violation::NonFiniteFeature { feature, value } => {
                write!(f, "non-finite feature {feature} at index {k} ({value})")
            }
            Violation::NonFiniteField(name) => write!(f, "non-finite {name} at index {k}"),
            Violation::ArityMismatch { expected, found } => write!(
                f,
                "arity mismatch at index {k}: schema has {expected} features, record has {found}"
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("log validation failed with {} error(s); first: {}", .0.len(), .0[0])]
    Validation(Vec<RecordError>),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("arity mismatch: expected {expected} features, found {found}")]
    Arity { expected: usize, found: usize },

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_)
            | Error::Arity { .. }
            | Error::Schema(_)
            | Error::Config(_)
            | Error::Parse { .. }
            | Error::InvalidArgument(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
