pub mod classifier;
pub mod codec;
pub mod cvae;
pub mod dataio;
pub mod error;
pub mod nn;
pub mod nullspace;
pub mod pipeline;
pub mod priors;
pub mod rng;

pub use error::{Error, Result};
