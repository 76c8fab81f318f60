//! Minimal dense numeric arrays with reverse-mode gradient propagation.
//!
//! Two precisions are supported through the [`Real`] trait: f64 for oracles
//! and gradient checks, f32 for training. Reductions accumulate sequentially
//! in index order so runs are bit-reproducible under a fixed seed.

mod check;
mod real;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use real::Real;
pub use tape::{rope2d_apply, NodeId, Tape};
pub use tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("{0}")]
    Config(String),
}
