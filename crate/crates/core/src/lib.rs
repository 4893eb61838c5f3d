//! Class-incremental two-stage object detection with meta-learned warp layers.

pub mod detector;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod stores;
pub mod task_stream;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
