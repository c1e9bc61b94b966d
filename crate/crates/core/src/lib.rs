pub mod cli;
pub mod error;
pub mod geometry;
pub mod basis;
pub mod sparse;
pub mod inference;
pub mod model;
pub mod opt;
pub mod spde;

pub use error::{Error, Result};
