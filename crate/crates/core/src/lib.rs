//! Joint single-object tracking and monocular depth estimation on CPU.

pub mod autograd;
pub mod bbox;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod preprocess;
pub mod synthworld;
pub mod tensor;
pub mod trainer;

pub use bbox::BoxXywh;
pub use error::{Error, Result};
pub use tensor::{Role, Tensor};
