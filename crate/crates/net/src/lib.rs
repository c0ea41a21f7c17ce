//! Serving layer. Index workers each hold a replica of the compressed
//! index and answer filter requests; refine workers each hold a shard of
//! the full vectors. A [`client::Client`] ties them together.

pub mod client;
pub mod cluster;
pub mod config;
pub mod error;
pub mod server;
pub mod wire;
pub mod worker;

pub use client::Client;
pub use cluster::{LocalCluster, ShardingKind};
pub use config::{BatchConfig, ClusterConfig, Sharding};
pub use error::{NetError, Result};
pub use server::{serve_index, serve_refine, ServerHandle};
pub use worker::{IndexWorker, RefineWorker};
