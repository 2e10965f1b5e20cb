//! Disentangled variational speech enhancement.

pub mod audio;
pub mod checkpoint;
pub mod dataset;
pub mod enhancement;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
