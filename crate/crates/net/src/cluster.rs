use std::path::Path;
use std::sync::Arc;

use sieve_core::index::read_manifest;

use crate::client::Client;
use crate::config::{BatchConfig, ClusterConfig, Sharding};
use crate::error::{NetError, Result};
use crate::server::{serve_index, serve_refine, ServerHandle};
use crate::worker::{IndexWorker, RefineWorker};

/// Which sharding policy a local cluster uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardingKind {
    ById,
    /// Partitions assigned to refine workers round-robin.
    ByIvf,
}

/// A whole cluster on loopback ports, started from one index checkpoint.
/// Every index worker loads the full compressed index; each refine worker
/// loads its shard of the full vectors.
pub struct LocalCluster {
    pub config: ClusterConfig,
    pub index_workers: Vec<Arc<IndexWorker>>,
    pub refine_workers: Vec<Arc<RefineWorker>>,
    servers: Vec<ServerHandle>,
}

impl LocalCluster {
    pub fn start(
        checkpoint: impl AsRef<Path>,
        n_index: usize,
        n_refine: usize,
        kind: ShardingKind,
        batch: BatchConfig,
    ) -> Result<Self> {
        let dir = checkpoint.as_ref();
        if n_index == 0 || n_refine == 0 {
            return Err(NetError::Config("need at least one worker of each role".into()));
        }
        let manifest = read_manifest(dir)?;
        let sharding = match kind {
            ShardingKind::ById => Sharding::ById,
            ShardingKind::ByIvf => Sharding::by_ivf_round_robin(manifest.n_partitions, n_refine),
        };
        let mut servers = Vec::new();
        let mut index_workers = Vec::new();
        let mut index_addrs = Vec::new();
        for _ in 0..n_index {
            let w = Arc::new(IndexWorker::from_checkpoint(dir, batch)?);
            let h = serve_index(w.clone(), "127.0.0.1:0").map_err(|e| NetError::Internal(e.to_string()))?;
            index_addrs.push(h.addr().to_string());
            index_workers.push(w);
            servers.push(h);
        }
        let mut refine_workers = Vec::new();
        let mut refine_addrs = Vec::new();
        for shard in 0..n_refine {
            let w = Arc::new(RefineWorker::from_index_checkpoint(dir, shard, n_refine, &sharding)?);
            let h = serve_refine(w.clone(), "127.0.0.1:0").map_err(|e| NetError::Internal(e.to_string()))?;
            refine_addrs.push(h.addr().to_string());
            refine_workers.push(w);
            servers.push(h);
        }
        let config = ClusterConfig { index_workers: index_addrs, refine_workers: refine_addrs, sharding };
        config.validate(Some(manifest.n_partitions))?;
        Ok(Self { config, index_workers, refine_workers, servers })
    }

    pub fn client(&self) -> Result<Client> {
        Client::new(self.config.clone())
    }

    pub fn shutdown(self) {
        for s in self.servers {
            if let Err(e) = s.shutdown() {
                log::warn!("server shutdown: {e}");
            }
        }
    }
}
