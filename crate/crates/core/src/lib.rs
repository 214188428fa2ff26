pub mod binarize;
pub mod config;
pub mod datasynth;
pub mod detect;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
