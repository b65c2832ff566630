pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{Real, Tensor};
