//! Dynamic/static segmentation of dynamic occupancy grid maps.

pub mod autolabel;
pub mod baseline;
pub mod datasetkit;
pub mod encoding;
pub mod error;
pub mod evalkit;
pub mod fcnmodels;
pub mod gridmap;
pub mod neuralnet;
pub mod simworld;
pub mod training;

pub use error::{Error, Result};
