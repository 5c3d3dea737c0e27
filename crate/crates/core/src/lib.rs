pub mod error;
pub mod model;
pub mod objective;

pub use error::{CimdlError, Result};
pub mod cli;
pub mod data;
pub mod eval;
pub mod optimizer;
