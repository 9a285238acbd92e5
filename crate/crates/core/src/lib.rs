pub mod backbone;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod fusion;
mod layers;
pub mod numerics;
pub mod prompt;
pub mod synthgen;
pub mod training;
pub mod temporal;
pub mod vision;

pub use error::{Error, Result};
