pub mod error;
pub mod generation;
pub mod io;
pub mod model;
pub mod projection;
pub mod style;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
