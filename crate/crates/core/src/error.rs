use thiserror::Error;

/// Errors raised by the analysis pipeline.
///
/// Statistical infeasibility (a clamped bound, an empty key) is not an error;
/// it is surfaced in the reports. These variants cover malformed input and
/// operations whose preconditions cannot be met.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid cell: {0}")]
    InvalidCell(String),

    #[error("unidentifiable parameters: {0}")]
    Unidentifiable(String),

    #[error("insufficient reference counts")]
    InsufficientReferenceCounts,

    #[error("insufficient statistics for AOPP bound: {0}")]
    InsufficientStatistics(String),

    #[error("division by zero: {0}")]
    ZeroDenominator(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("malformed record {index}: {message}")]
    MalformedRecord { index: usize, message: String },

    #[error("empty feasible region: {0}")]
    EmptyFeasibleRegion(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
