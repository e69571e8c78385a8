//! Tensor substrate: dense tensors, differentiable kernels, gradient checking
//! and the seeded random source.

pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, Stencil, Objective, ParamCheck};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
