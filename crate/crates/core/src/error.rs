use std::path::PathBuf;

use thiserror::Error;

use crate::training::TrainReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid quadrature rule: {0}")]
    InvalidRule(String),

    #[error("integration blew up at t = {time}")]
    IntegrationBlowup { time: f64 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("equilibrium undefined: mu + u3 = 0")]
    SingularEquilibrium,

    #[error("state dimension {dim} has zero range; cannot normalize")]
    DegenerateDimension { dim: usize },

    #[error("horizon {horizon} exceeds trajectory length {steps}")]
    HorizonTooLong { horizon: usize, steps: usize },

    #[error("parse error in {path}: {message} (line {line}, column {column})")]
    Parse {
        path: String,
        message: String,
        line: usize,
        column: usize,
    },

    #[error("unsupported file version {0}")]
    UnsupportedVersion(u64),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("prediction diverged at step {step}")]
    Divergence { step: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged {
        epoch: usize,
        partial: Box<TrainReport>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidRule(_)
                | Error::Config(_)
                | Error::HorizonTooLong { .. }
                | Error::SingularEquilibrium
        )
    }
}
