//! CBAM-enhanced convolutional backbones for multi-label image
//! classification, built on a small reverse-mode tensor engine.

pub mod attention;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
