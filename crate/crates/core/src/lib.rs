pub mod attacks;
pub mod data;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod landscape;
pub mod nn;
pub mod protocols;
pub mod rng;
pub mod training;
pub mod triggers;

pub use error::{Error, Result};
