pub mod analysis;
pub mod counting;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod jdm;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod score;
pub mod tensor;
pub mod toyshape;

pub use error::{Error, Result};
pub use tensor::Tensor;
