use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("integrity error in {path}: {message}")]
    Integrity { path: PathBuf, message: String },
    #[error("resize infeasible for {height}x{width} under (min={min_pixels}, max={max_pixels}, factor={factor})")]
    InfeasibleResize {
        height: usize,
        width: usize,
        min_pixels: usize,
        max_pixels: usize,
        factor: usize,
    },
    #[error("{0}")]
    Contract(String),
    #[error("{0}")]
    Config(String),
    #[error("sequence {id} has {len} tokens, exceeding the {cap}-token batch cap")]
    OversizeSequence { id: String, len: usize, cap: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error(transparent)]
    Tensor(#[from] nvf_tensor::TensorError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
