//! Measurement tooling: dataset files, synthetic data, exact ground
//! truth, recall and throughput sweeps, and mixed read/write workloads.

pub mod backend;
pub mod error;
pub mod formats;
pub mod gt;
pub mod rw;
pub mod sweep;
pub mod synth;

pub use backend::Backend;
pub use error::{BenchError, Result};
pub use gt::{ground_truth, recall_at, GroundTruth};
pub use synth::{gaussian_mixture, mixture_with_queries, MixtureModel, SynthConfig};
