use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the sensor twin.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible contact geometry: {0}")]
    GeometryInfeasible(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no contact detected (peak {peak_mm:.4} mm below noise floor {floor_mm:.4} mm)")]
    NoContact { peak_mm: f64, floor_mm: f64 },

    #[error("gaussian fit failed after {iterations} iterations: {reason}")]
    FitFailed { iterations: usize, reason: String },

    #[error("ambiguous marker match for reference markers {indices:?}")]
    AmbiguousMatch { indices: Vec<usize> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
