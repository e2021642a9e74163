pub mod augment;
pub mod compile;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod manifest;
pub mod presets;
pub mod protocol;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod slide;
pub mod split;
pub mod stats;
pub mod synth;
pub mod tissue;
pub mod vit;

pub use error::{Error, Result};
pub use exec::Exec;
pub use raster::Raster;
pub use slide::{open_slide, Slide};
