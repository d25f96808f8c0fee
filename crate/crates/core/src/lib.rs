//! Replaced-token-detection pretraining and GLUE-style evaluation on CPU.
//!
//! The crate is generic over the scalar type: `f32` for training throughput,
//! `f64` for gradient checking. Concrete aliases live at the crate root.

pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::{ops, tape::Tape, Tensor, TensorError};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Gradient-checking-precision tensor.
pub type Tensor64 = Tensor<f64>;
