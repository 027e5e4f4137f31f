pub mod augment;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod manifold;
pub mod network;
pub mod rugosity;
pub mod train;

pub use error::{Error, Result};
