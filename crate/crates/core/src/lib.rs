//! Channel/spatial attention topologies on a small dense tensor engine,
//! with a training harness, cost accounting and analysis tools.

pub mod analysis;
pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod params;
pub mod tensor;
pub mod topology;
pub mod train;

pub use error::{Error, Result};
