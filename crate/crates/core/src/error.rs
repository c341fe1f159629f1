use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file did not conform to its declared layout. `location` names the
    /// byte offset (binary) or record/field (CSV) where parsing stopped.
    #[error("malformed input at {location}: {detail}")]
    Format { location: String, detail: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("variable `{0}` is constant over the snapshots; cannot scale")]
    ZeroScale(String),

    #[error("integration diverged at step {step} (t = {time})")]
    Diverged { step: usize, time: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("correlation undefined{}: field has zero variance", at_step.map(|k| format!(" at time index {k}")).unwrap_or_default())]
    UndefinedCorrelation { at_step: Option<usize> },

    #[error("no feasible regularization on the grid; best infeasible candidate: gamma1 = {gamma1:e}, gamma2 = {gamma2:e}, training error = {training_error:e}")]
    NoFeasibleRegularization {
        gamma1: f64,
        gamma2: f64,
        training_error: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Coarse error classes, used by front ends to pick exit codes and message
/// prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Io,
    Format,
    Dimension,
    Argument,
    Numerical,
    Config,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Io => "io",
            Category::Format => "format",
            Category::Dimension => "dimension",
            Category::Argument => "argument",
            Category::Numerical => "numerical",
            Category::Config => "config",
        }
    }
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Io { .. } => Category::Io,
            Error::Format { .. } | Error::NonFinite(_) => Category::Format,
            Error::Dimension(_) => Category::Dimension,
            Error::InvalidArgument(_) | Error::ZeroScale(_) => Category::Argument,
            Error::Diverged { .. }
            | Error::Numerical(_)
            | Error::UndefinedCorrelation { .. }
            | Error::NoFeasibleRegularization { .. } => Category::Numerical,
            Error::Config(_) => Category::Config,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            detail: detail.into(),
        }
    }

    /// I/O failures keep their kind; anything else is a malformed record.
    pub(crate) fn csv(path: &std::path::Path, e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path.display().to_string(), format!("{other:?}")),
        }
    }
}
