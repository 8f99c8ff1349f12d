pub mod error;
pub mod raster;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod graph;
pub mod infer;
pub mod kernels;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;
