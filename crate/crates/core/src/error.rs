use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong between data generation and closed-loop evaluation.
#[derive(Debug, Error)]
pub enum KmaError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("simulation diverged at step {step}")]
    Diverged { step: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("degenerate denominator in {0} dynamics")]
    DegenerateDenominator(&'static str),

    #[error("riccati iteration did not yield a stabilizing solution: {0}")]
    NotStabilizable(String),

    #[error("held-out partition required")]
    MissingHeldOut,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<KmaError>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl KmaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KmaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        KmaError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        KmaError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        KmaError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 usage/config, 2 numeric failure, 3 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            KmaError::Stage { source, .. } => source.exit_code(),
            KmaError::Io { .. } | KmaError::Format { .. } => 3,
            KmaError::Diverged { .. }
            | KmaError::TrainingDiverged { .. }
            | KmaError::NotStabilizable(_)
            | KmaError::DegenerateDenominator(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, KmaError>;
