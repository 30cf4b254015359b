use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unsupported CFA pattern {0}; only GBRG is supported")]
    UnsupportedPattern(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("degenerate image: {0}")]
    DegenerateImage(String),

    #[error("chromaticity ({x:.4}, {y:.4}) is outside the CCT approximation domain")]
    OutOfGamut { x: f64, y: f64 },

    #[error("colour space mismatch: expected {expected}, found {found}")]
    SpaceMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("histogram binning mismatch")]
    BinningMismatch,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
