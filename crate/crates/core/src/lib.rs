pub mod error;
pub mod flow;
pub mod model;
pub mod probe;
pub mod tasks;

pub use error::{Error, Result};
