//! Approximate nearest-neighbour search with a learned reduction transform,
//! an IVF coarse quantizer and 4-bit product quantization.

mod bin;
pub mod clustering;
pub mod error;
pub mod index;
pub mod ivf;
pub mod pq;
pub mod train;
pub mod vector;

pub use error::{Error, Result};
pub use vector::{Dataset, Matrix, Metric, Transform};
