pub mod autodiff;
pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod imageio;
pub mod maskgen;
pub mod metrics;
pub mod codec;
pub mod trainer;
pub mod nerv;
