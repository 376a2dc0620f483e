//! Gradient-masked pseudo-label training for a miniature RNN-Transducer.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod masking;
pub mod model;
pub mod rng;
pub mod rnnt;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
