//! Phenology-driven rice paddy classification from Sentinel-2 time series.

pub mod calibration;
pub mod classifier;
pub mod cube_io;
pub mod district;
pub mod error;
pub mod indices;
pub mod phenology;
pub mod preprocess;
pub mod raster;
pub mod reference;
pub mod stats;
pub mod synthetic;
pub mod validation;

pub use error::{Error, Result};
