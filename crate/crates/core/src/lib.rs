//! Streaming video understanding with task-aware feature modulation, dual
//! bounded memory banks, and hierarchically coupled query transformers.

pub mod autograd;
pub mod bench;
pub mod config;
pub mod container;
pub mod error;
pub mod head;
pub mod memory;
pub mod model;
pub mod modulator;
pub mod nn;
pub mod prompt;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{HierarqError, Result};
pub use tensor::{Scalar, Tensor};
