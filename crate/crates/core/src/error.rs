use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("query {query} outside interpolation range [{min}, {max}]")]
    OutOfRange { query: f64, min: f64, max: f64 },

    #[error("training diverged in round {round}: non-finite parameter")]
    Divergence { round: usize },

    #[error("calibration infeasible: {reason} (max achievable drop {max_drop:.4})")]
    CalibrationInfeasible { reason: String, max_drop: f64 },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("grid aborted after {} completed cells: {source}", completed.len())]
    GridAborted {
        completed: Vec<CellId>,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed document: {message}")]
    Format { path: PathBuf, message: String },
}

/// Coordinates of one experiment cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId {
    pub seed: u64,
    pub ratio_idx: usize,
    pub severity_idx: usize,
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } | Error::GridAborted { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::InvalidConfig(_) | Error::Format { .. }
        )
    }

    pub fn is_calibration_infeasible(&self) -> bool {
        matches!(self.root(), Error::CalibrationInfeasible { .. })
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
