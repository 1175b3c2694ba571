pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod heads;
pub mod model;
pub mod ordinal;
pub mod rng;

pub use error::{Error, Result};
