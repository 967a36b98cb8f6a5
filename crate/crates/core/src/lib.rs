pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod datagen;
pub mod dirconv;
pub mod error;
pub mod metrics;
pub mod network;
pub mod params;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
