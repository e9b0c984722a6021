//! Deep k-nearest-neighbor conformity for text classifiers, and
//! leave-one-out word saliency built on it.

pub mod analysis;
pub mod cli;
pub mod attribution;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod neighbors;
pub mod render;
pub mod synth;

pub use error::{Error, Result};
