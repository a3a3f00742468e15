//! CPU tensor engine, checkpointed autograd, and Ladder DenseNet models.

pub mod analyzer;
pub mod autograd;
pub mod dataio;
pub mod error;
pub mod kernels;
pub mod ldnt;
pub mod nets;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
