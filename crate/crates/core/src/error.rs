use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by bundle I/O, solvers and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonfiniteValue { row: usize, col: usize },

    #[error("invalid split tag {tag:?} on line {line}")]
    InvalidSplitTag { tag: String, line: usize },

    #[error("malformed rows file on line {line}: {reason}")]
    MalformedRows { line: usize, reason: String },

    #[error("invalid bundle: {0}")]
    InvalidBundle(String),

    #[error("degenerate long-tail counts: smallest class would hold {0} rows")]
    Degenerate(f64),

    #[error("class {class} has {available} rows, needs {required}")]
    InsufficientSource { class: usize, available: usize, required: usize },

    #[error("bisection for the class-marginal multiplier failed to bracket a root")]
    BracketFailure,

    #[error("non-finite loss in epoch {epoch}, batch {batch}: {detail}")]
    NonfiniteLoss { epoch: usize, batch: usize, detail: String },

    #[error("head produced non-finite predictions at row {row}")]
    NonfiniteOutput { row: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Coarse category, used by the command line to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::BracketFailure | Error::NonfiniteLoss { .. } | Error::NonfiniteOutput { .. } | Error::Degenerate(_) => {
                ErrorKind::Numerical
            }
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    /// Process exit code for this category.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
