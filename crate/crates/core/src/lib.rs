pub mod autodiff;
pub mod checkpoint;
pub mod data;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
