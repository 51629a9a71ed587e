//! Streaming voice conversion with a discrete semantic bottleneck.

pub mod acoustic;
pub mod conformer;
pub mod corpus;
pub mod error;
pub mod frontend;
pub mod kmeans;
pub mod latency;
pub mod layers;
pub mod lm;
pub mod gradcheck;
pub mod masks;
pub mod params;
pub mod probe;
pub mod session;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod wire;
pub mod verify;
pub mod vocoder;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Production-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = Tensor<f64>;
