use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("i/o error on {path}: {source}")]
    IoPath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0} out of domain")]
    Domain(String),

    #[error("structure extent {extent} along {axis} axis exceeds cube side {dim}")]
    StructureTooLarge { axis: char, extent: u64, dim: u32 },

    #[error("{k} occupied voxels do not fit a sequence of length {len}")]
    SequenceOverflow { k: usize, len: usize },

    #[error("slot {slot} is still masked")]
    IncompleteSample { slot: usize },

    #[error("position ({x}, {y}, {z}) appears more than once")]
    DuplicatePosition { x: u16, y: u16, z: u16 },

    #[error("token {token} at slot {slot} is not a block token")]
    InvalidToken { slot: usize, token: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("non-finite activation in {layer}")]
    Numeric { layer: String },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl Error {
    pub(crate) fn domain(what: impl Into<String>) -> Self {
        Error::Domain(what.into())
    }

    pub(crate) fn io_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoPath {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
