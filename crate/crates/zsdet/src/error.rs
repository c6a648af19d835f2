//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: corners must satisfy x1 < x2, y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("crop region degenerated to zero area after clipping: [{x1}, {y1}, {x2}, {y2}]")]
    DegenerateCrop { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("box [{x1}, {y1}, {x2}, {y2}] does not intersect a {w}x{h} image")]
    BoxOutsideImage {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        w: u32,
        h: u32,
    },

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("category `{0}` is listed as both base and novel")]
    AmbiguousCategory(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector where a direction is required")]
    ZeroNorm,

    #[error("store format error: {0}")]
    Store(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
