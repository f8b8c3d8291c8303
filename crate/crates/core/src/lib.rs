//! Tiny vision transformer training framework: masked-image pre-training,
//! intermediate classification, tri-map segmentation fine-tuning, and an
//! experiment grid runner with reporting.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exprunner;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod train;

pub use error::{Error, Result};
