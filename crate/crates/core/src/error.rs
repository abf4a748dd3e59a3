use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth {0} (must be finite and > 0)")]
    InvalidDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("rotation angle {0} too close to pi for a stable logarithm")]
    NearSingularLog(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("not a rotation matrix: {0}")]
    InvalidRotation(String),
    #[error("no rgb/depth pairs could be associated")]
    NoAssociations,
    #[error("image dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("bounding box does not intersect the image")]
    InvalidBbox,
    #[error("degenerate trimap: {0}")]
    DegenerateTrimap(String),
    #[error("insufficient overlap: valid pixel fraction {0:.4} below threshold")]
    InsufficientOverlap(f64),
    #[error("alignment diverged (non-finite cost)")]
    Divergence,
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
