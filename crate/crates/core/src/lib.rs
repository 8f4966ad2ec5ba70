//! A small dense object detector laboratory built around task-specific
//! context decoupling: classification reads a coarse, semantically richer
//! encoding of the feature pyramid while localization reads a detail
//! preserving one.

pub mod cost;
pub mod detection;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod heads;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tape, Tensor4, Var};
