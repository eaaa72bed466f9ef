//! Physics-constrained conditional GAN spatial regression of built-land maps,
//! with urban-form validation statistics and input-gradient sensitivity
//! analysis.

pub mod autodiff;
pub mod container;
pub mod error;
pub mod gan;
pub mod raster;
pub mod sensitivity;
pub mod stats;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
