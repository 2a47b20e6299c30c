pub mod error;
pub mod functionals;
pub mod geometry;
mod linalg;
pub mod mixture;
pub mod mle;
pub mod sampler;
pub mod solver;
pub mod tent;

pub use error::{Error, Result};
