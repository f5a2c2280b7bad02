//! Per-garment virtual try-on: garment-invariant body representations,
//! semantic-map estimation, recurrent garment synthesis, a streaming runtime
//! and evaluation metrics, plus a procedural avatar world to train and test on.

pub mod bodymap;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod girep;
pub mod heatmap;
mod im2col;
pub mod metrics;
pub mod nn;
pub mod perception;
pub mod pgdataset;
pub mod raster;
pub mod regarsyn;
pub mod runtime;
pub mod semantic;
pub mod synth;
pub mod video;

pub use error::{Error, Result};
