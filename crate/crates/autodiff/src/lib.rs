//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The op set is deliberately small: what convolutional BEV encoders,
//! deformable attention and detection losses need. Everything runs in 64-bit
//! so finite-difference checks are tight.

pub mod check;
mod graph;
mod kernels;
pub mod linalg;
mod params;
mod tensor;

pub use check::{grad_check, GradCheck, GradCheckError, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
}
