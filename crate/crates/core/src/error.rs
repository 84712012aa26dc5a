//! Error types shared across the toolkit.

use std::path::PathBuf;
use thiserror::Error;

/// Unified error type for all toolkit operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {path}")]
    MissingFile { path: PathBuf },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("malformed WAV file {path}: {detail}")]
    MalformedWav { path: PathBuf, detail: String },

    #[error("unsupported WAV encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("clip too short: {0}")]
    ClipTooShort(String),

    #[error("expected sample rate {expected} Hz, got {actual} Hz")]
    WrongSampleRate { expected: u32, actual: u32 },

    #[error("spectrogram too short: {0}")]
    SpectrogramTooShort(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("singular covariance: {0}")]
    SingularCovariance(String),

    #[error("{path}:{line}: {detail}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("malformed model file {path}: {detail}")]
    MalformedModel { path: PathBuf, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Classify an I/O error, mapping NotFound to MissingFile.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
