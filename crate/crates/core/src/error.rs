use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    RotationNearPi { angle: f64 },

    #[error("index {index} out of range for degree {degree}")]
    IndexOutOfRange { index: usize, degree: usize },

    #[error("time {time} lies outside the exposure window [0, {exposure}]")]
    TimeOutOfRange { time: f64, exposure: f64 },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("timestamps are not monotonic at index {index}")]
    NonMonotonicTimestamps { index: usize },

    #[error("event window [{stream_start}, {stream_end}] does not match exposure [{start}, {end}]")]
    WindowMismatch {
        stream_start: f64,
        stream_end: f64,
        start: f64,
        end: f64,
    },

    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),

    #[error("unknown blur level {0}")]
    UnknownBlurLevel(u32),

    #[error("scene is empty")]
    EmptyScene,

    #[error("scene capacity {capacity} exceeded")]
    CapacityExceeded { capacity: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("non-finite values in {group}: {detail}")]
    NonFinite { group: String, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
