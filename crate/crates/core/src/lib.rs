//! Distant-object detection: a DCGAN enhancer in front of a single-shot
//! detector, with the discriminator reused as a feature extractor.

mod checkpoint;
pub mod cascade;
pub mod dataset_io;
pub mod enhancer;
mod error;
pub mod eval;
pub mod features;
pub mod gan;
pub mod geometry;
pub mod ssd;

pub use error::{Error, Result};
pub use geometry::{iou, BBox};
