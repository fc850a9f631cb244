//! Minimal CPU neural-network toolkit: dense tensors, convolution and
//! fully-connected layers with explicit backward passes, batch norm, Adam,
//! and a tensor archive format for checkpoints.

pub mod archive;
mod float;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod pool;
mod tensor;

pub use archive::{Archive, ArchiveError};
pub use float::Float;
pub use layers::{Layer, Mode, Module, Param, Sequential};
pub use optim::Adam;
pub use tensor::Tensor;
