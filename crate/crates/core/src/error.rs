use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point behind camera (z = {z})")]
    PointBehindCamera { z: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no instance in view after {attempts} attempts")]
    NoInstancesInView { attempts: usize },

    #[error("frame sets differ; missing frames: {}", .0.join(", "))]
    MissingFrames(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
