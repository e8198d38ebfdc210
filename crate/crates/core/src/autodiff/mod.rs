//! Minimal reverse-mode differentiable tensor engine.
//!
//! The op set is closed: matmul, conv2d (standard, depthwise, 1×1, strided),
//! layer norm, softmax, sigmoid, GELU, broadcasting arithmetic, exp/log/pow,
//! scalar ops, global max/avg pooling, reductions, concat, reshape, transpose
//! and broadcast. Everything in the model is composed from these.

pub mod adamw;
pub mod conv;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{grad_check, grad_check_at, relative_error, InputDist};
pub use tape::{Tape, Var};
pub use tensor::{DType, Real, Tensor};

#[cfg(test)]
mod tests;
