//! ConvTransSeg: a residual CNN encoder feeding a multi-level Transformer
//! decoder for image segmentation, built on a small reverse-mode autodiff
//! engine.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod runconfig;
pub mod tensor;
pub mod trainer;

pub use error::{CtsError, Result};
pub use tensor::{RngState, Scalar, Tape, Tensor, Var};
