use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

/// How full vectors are spread over the refine workers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Sharding {
    /// Worker `id % n`.
    ById,
    /// Worker `partition_map[pid]` for the id's IVF partition.
    ByIvf { partition_map: Vec<usize> },
}

impl Sharding {
    /// Round-robin map of `n_partitions` partitions onto `n_workers`.
    pub fn by_ivf_round_robin(n_partitions: usize, n_workers: usize) -> Self {
        Sharding::ByIvf { partition_map: (0..n_partitions).map(|p| p % n_workers.max(1)).collect() }
    }

    pub fn route(&self, id: u64, pid: usize, n_workers: usize) -> usize {
        match self {
            Sharding::ById => (id % n_workers as u64) as usize,
            Sharding::ByIvf { partition_map } => partition_map[pid],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// `host:port` of every index worker. Each holds a full replica.
    pub index_workers: Vec<String>,
    /// `host:port` of every refine worker, in shard order.
    pub refine_workers: Vec<String>,
    pub sharding: Sharding,
}

impl ClusterConfig {
    pub fn validate(&self, n_partitions: Option<usize>) -> Result<()> {
        if self.index_workers.is_empty() || self.refine_workers.is_empty() {
            return Err(NetError::Config("need at least one index worker and one refine worker".into()));
        }
        if let Sharding::ByIvf { partition_map } = &self.sharding {
            if let Some(n) = n_partitions {
                if partition_map.len() != n {
                    return Err(NetError::Config(format!(
                        "partition map covers {} partitions, index has {n}",
                        partition_map.len()
                    )));
                }
            }
            if let Some(&w) = partition_map.iter().find(|&&w| w >= self.refine_workers.len()) {
                return Err(NetError::Config(format!("partition map names refine worker {w}")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| NetError::Config(format!("{}: {e}", path.as_ref().display())))?;
        let cfg: ClusterConfig = serde_json::from_str(&text).map_err(|e| NetError::Config(e.to_string()))?;
        cfg.validate(None)?;
        Ok(cfg)
    }
}

/// Dynamic batching of filter requests inside an index worker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    /// Longest a request waits for others once a batch has formed.
    pub window: Duration,
    pub max_batch: usize,
    /// Threads draining the request queue.
    pub threads: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4);
        Self { window: Duration::from_millis(1), max_batch: 64, threads }
    }
}
