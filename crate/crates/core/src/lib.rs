//! Normalized autoencoders: reconstruction-error energies trained by maximum
//! likelihood with Langevin negative sampling.

pub mod cli;
pub mod density;
pub mod diff;
pub mod error;
pub mod eval;
pub mod model;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
