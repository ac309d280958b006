//! Routing-free capsule networks: capsule convolution, squash and margin
//! loss with exact backward passes, model presets, data loading, training
//! and post-hoc analysis.

pub mod activation;
pub mod analysis;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod perf;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;
pub use tensor::{CapsuleShape, FeatureMap, FeatureMapShape, KernelShape, Tensor};
