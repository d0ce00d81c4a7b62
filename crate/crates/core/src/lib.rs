//! Module-wise pruning error (MoPE) scoring, structured width/depth pruning
//! and cross-modal plus uni-modal distillation for dual-encoder contrastive
//! transformers.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases at the crate root fix the element type to `f64`, which is what the
//! command-line tool, the persisted artifacts and the test oracles use.

pub mod distill;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod pruning;
pub mod scalar;
pub mod scoring;
pub mod workbench;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numerics::Tensor<f64>;
pub type Graph = numerics::Graph<f64>;
pub type DualEncoder = model::DualEncoder<f64>;
pub type Scored = scoring::Scored<f64>;
pub type PipelineRun = pruning::PipelineRun<f64>;
