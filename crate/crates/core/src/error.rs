use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the mapping pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid configuration at `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("degenerate ray direction at pixel ({u}, {v})")]
    DegenerateRay { u: usize, v: usize },
    #[error("trajectory: {0}")]
    Trajectory(String),
    #[error("frame {frame}: {reason}")]
    Frame { frame: String, reason: String },
    #[error("no valid pixels in frame")]
    NoValidPixels,
    #[error("pixel ({u}, {v}) has no valid depth")]
    InvalidPixel { u: usize, v: usize },
    #[error("surface at pixel ({u}, {v}) is closer than the minimum ray depth")]
    SurfaceTooClose { u: usize, v: usize },
    #[error("surface set is empty")]
    EmptySurface,
    #[error("no updated grid cells to train on")]
    EmptyBatch,
    #[error("non-finite {what} at batch item {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("non-finite parameters")]
    NonFiniteParams,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("empty evaluation region: {0}")]
    EmptyRegion(String),
    #[error("empty frame stream")]
    EmptyStream,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
