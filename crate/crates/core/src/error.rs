use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("length mismatch in {context}: expected {expected}, found {found}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("frame count mismatch: expected {expected}, found {found}")]
    FrameCountMismatch { expected: usize, found: usize },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid depth {0}: must be finite and positive")]
    InvalidDepth(f64),

    #[error("time {0} outside the scene's timestamp range")]
    TimeOutOfRange(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("consensus needs at least 2 views, got {0}")]
    TooFewViews(usize),

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no reliable supervision: consensus rejected every view")]
    NoReliableEvidence,

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed document: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: format error at byte {offset}: {message}", path.display())]
    Format {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("{}: unsupported schema version {found:?}", path.display())]
    SchemaVersion { path: PathBuf, found: String },

    #[error("{}: {message}", path.display())]
    Dataset { path: PathBuf, message: String },
}
