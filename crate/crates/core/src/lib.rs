//! Native-resolution AI-generated-video detection, end to end on the CPU:
//! variable-resolution ingest, 3D patchification, a packed pre-norm
//! transformer backbone, binary-classifier training with three tuning
//! modes, the evaluation metric suite, cross-generator analysis, a
//! procedural synthetic corpus, and the perturbation-robustness protocol.

pub mod backbone;
pub mod checkpoint;
pub mod crossval;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod packing;
pub mod patchify;
pub mod pipeline;
pub mod robustness;
pub mod synthdata;
pub mod train;
pub mod util;

pub use error::{CoreError, Result};
