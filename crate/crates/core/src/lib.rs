//! Pathloss map generation from UAV RGB-D sensing: a procedural urban scene
//! and ray-traced labels for data, and a patch-embedding plus transformer
//! plus transposed-convolution model for prediction.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod embed;
pub mod error;
pub mod model;
pub mod nn;
pub mod propagate;
pub mod scene;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
