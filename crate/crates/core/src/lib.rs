pub mod augment;
pub mod error;
pub mod mdtnet;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod synthgen;
pub mod vesselgraph;

pub use error::{Error, Result};
