//! Two-stage facial expression recognition under low light.
//!
//! Stage 1 learns a compact expression prior from clean images and their
//! label text; stage 2 recovers that prior from degraded images alone with a
//! small diffusion chain and uses it to steer a transformer classifier.

pub mod data;
pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod kernels;
pub mod laclip;
pub mod llformer;
pub mod model;
pub mod nn;
pub mod pnet;
pub mod raster;
pub mod training;

pub use error::{Error, Result};
