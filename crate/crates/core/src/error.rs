use std::path::PathBuf;

use crate::maskops::BBox;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("visible mask is not contained in the full mask at {count} pixel(s)")]
    NotSubset { count: usize },

    #[error("visible and invisible regions overlap at {count} pixel(s)")]
    RegionOverlap { count: usize },

    #[error("degenerate bounding box {0:?}")]
    DegenerateBox(BBox),

    #[error("empty crop: {0:?} does not intersect a {1}x{2} raster")]
    EmptyCrop(BBox, usize, usize),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Corrupt { path: PathBuf, msg: String },

    #[error("{}: sample invariant violated: {msg}", path.display())]
    Invariant { path: PathBuf, msg: String },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("scene seed {0} is used by both the train and test splits")]
    SeedCollision(u64),

    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
