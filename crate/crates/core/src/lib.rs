pub mod container;
pub mod contrastive;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
