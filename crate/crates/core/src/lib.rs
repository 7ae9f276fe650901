//! Permutation invariant temporal convolution layers with training,
//! synthetic data and evaluation tooling.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod persist;
pub mod synthdata;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod verify;

pub use config::{Padding, RunConfig, Task, Variant};
pub use error::{PicError, Result};
pub use tensor::Tensor;
