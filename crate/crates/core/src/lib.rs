//! Brain-signal-to-text decoding through several modality-specific
//! projectors, fused by a learned router, at desk scale.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which the training pipeline and the CLI
//! use.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod router;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Array = tensor::Array<f64>;
pub type Graph = tensor::Graph<f64>;
pub type Tensor<'g> = tensor::Tensor<'g, f64>;
pub type ParamSet = params::ParamSet<f64>;
pub type Model = training::Model<f64>;
pub type Trainer = training::Trainer<f64>;
pub type Checkpoint = training::Checkpoint<f64>;
