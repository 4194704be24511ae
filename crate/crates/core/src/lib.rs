//! Prototype-based knowledge retrieval for multi-task partially supervised
//! dense prediction.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod gradcheck;
pub mod model;
pub mod network;
pub mod nn;
pub mod prototype;
pub mod retrieval;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::Tensor;
