//! Point cloud completion with selective state-space encoders.

pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod points;
pub mod rng;
pub mod runconfig;
pub mod selftest;
pub mod ssm;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
