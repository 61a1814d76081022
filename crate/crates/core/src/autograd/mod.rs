//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are row-major and generic over [`Scalar`] (`f32` for training,
//! `f64` for gradient checks). Reductions accumulate in `f64` regardless of
//! storage precision.

pub mod gemm;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use scalar::{DType, Scalar};
pub use tape::{AttentionSpec, Tape, Var};
pub use tensor::Tensor;
