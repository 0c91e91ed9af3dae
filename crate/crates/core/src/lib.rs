pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
