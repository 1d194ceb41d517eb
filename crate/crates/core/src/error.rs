use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report.
///
/// Variants are grouped by [`ErrorClass`], which the command-line front end
/// maps onto process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid geometry in {op}: {detail}")]
    Geometry { op: &'static str, detail: String },

    #[error("invalid parameter for {op}: {detail}")]
    Parameter { op: &'static str, detail: String },

    #[error("degenerate variance in batch_norm: {0}")]
    DegenerateVariance(String),

    #[error("index {index} out of range for {len} {what}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("gradient check failed: max relative error {max_rel_error:e} > {tol:e}")]
    GradCheck { max_rel_error: f64, tol: f64 },

    #[error("BN folding deviation {deviation:e} exceeds {tol:e}")]
    FoldDeviation { deviation: f64, tol: f64 },

    #[error("frozen teacher modified: checksum {before} became {after}")]
    FrozenTeacher { before: String, after: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("flop accounting: {0}")]
    Accounting(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("cannot read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes used for exit codes.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad invocation, config, or architecture mismatch.
    Usage,
    /// Missing, malformed, or unreadable data.
    Data,
    /// NaN, gradient-check, or folding failures.
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Dimension { .. }
            | Error::Geometry { .. }
            | Error::Parameter { .. }
            | Error::Index { .. }
            | Error::Contract(_)
            | Error::TapeConsumed
            | Error::Config(_)
            | Error::Accounting(_)
            | Error::ArchitectureMismatch(_)
            | Error::Json(_) => ErrorClass::Usage,
            Error::Checkpoint(_) | Error::Data(_) | Error::Image { .. } | Error::Io { .. } => {
                ErrorClass::Data
            }
            Error::DegenerateVariance(_)
            | Error::NonFinite { .. }
            | Error::Divergence { .. }
            | Error::GradCheck { .. }
            | Error::FoldDeviation { .. }
            | Error::FrozenTeacher { .. } => ErrorClass::Numerical,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
