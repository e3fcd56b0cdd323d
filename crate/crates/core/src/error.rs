use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("(sr / hs) / fps = {0} is not a positive integer")]
    NonIntegerRatio(f64),

    #[error("invalid shape config: {0}")]
    InvalidShapeConfig(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("phoneme id {id} outside vocabulary of size {vocab}")]
    UnknownPhonemeId { id: usize, vocab: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("segment bounds {start}..{end} out of range for {len} rows")]
    BoundsOutOfRange { start: usize, end: usize, len: usize },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("no frame is voiced in both tracks")]
    NoVoicedOverlap,

    #[error("empty pitch track")]
    EmptyTrack,

    #[error("corpus carries no pitch map")]
    MissingPitchMap,

    #[error("non-finite loss at step {step}")]
    DivergenceDetected { step: u64 },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
