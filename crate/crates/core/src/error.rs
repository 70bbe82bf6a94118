use std::path::PathBuf;

use crate::circuit::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed circuit: {0}")]
    MalformedCircuit(String),

    #[error("circuit node references form a cycle")]
    Cycle,

    #[error("circuit failed validation: {0}")]
    Validation(String),

    #[error("invalid evidence: {0}")]
    InvalidEvidence(String),

    #[error("density diverges at the simplex boundary (coordinate {coordinate}, alpha {alpha})")]
    BoundaryDivergence { coordinate: usize, alpha: f64 },

    #[error("non-finite value {value} at node {node}")]
    NonFinite { node: NodeId, value: f64 },

    #[error("degenerate evidence: every class has zero joint density")]
    DegenerateEvidence,

    #[error("refused: {0}")]
    Refused(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: usize, detail: String },

    #[error("example {index}: {source}")]
    AtExample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("{path}: line {line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_example(index: usize, source: Error) -> Self {
        Error::AtExample {
            index,
            source: Box::new(source),
        }
    }

    /// Coarse category used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io(_) => ErrorCategory::Io,
            Error::Json(_)
            | Error::Csv(_)
            | Error::Format { .. }
            | Error::SchemaVersion { .. }
            | Error::Cycle
            | Error::MalformedCircuit(_) => ErrorCategory::Format,
            Error::Usage(_) => ErrorCategory::Usage,
            Error::AtExample { source, .. } => source.category(),
            Error::NonFiniteLoss { .. }
            | Error::NonFinite { .. }
            | Error::DegenerateEvidence
            | Error::BoundaryDivergence { .. } => ErrorCategory::Numerical,
            _ => ErrorCategory::Contract,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Io,
    Format,
    Contract,
    Numerical,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Format => 4,
            ErrorCategory::Contract => 5,
            ErrorCategory::Numerical => 6,
        }
    }
}
