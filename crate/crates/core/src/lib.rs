pub mod config;
pub mod consensus;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod guidance;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod stats;
pub mod synth;

pub use config::{Optimizer, PipelineConfig};
pub use error::{Error, Result};
