pub mod adapter;
pub mod config;
pub mod error;
pub mod evalharness;
pub mod losses;
pub mod manifest;
pub mod microlm;
pub mod optim;
pub mod selfcheck;
pub mod signals;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use tensor::Tensor;
