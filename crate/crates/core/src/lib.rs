pub mod dataio;
pub mod error;
pub mod gradcore;
pub mod harness;
pub mod metrics;
pub mod misa;
pub mod missingness;
pub mod models;
pub mod seed;

pub use error::{Error, Result};
