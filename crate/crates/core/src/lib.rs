//! Multi-channel speech enhancement with a selective state-space generator.

pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod mamba;
pub mod metrics;
pub mod network;
pub mod sim;
pub mod ssm;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
