//! Residual attention feature matching.

pub mod assignment;
pub mod attention;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod featio;
pub mod gradcheck;
pub mod nn;
pub mod pipeline;
pub mod residual;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor2;
