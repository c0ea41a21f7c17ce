//! One interface over a local index and a remote cluster, so the load
//! generators drive either.

use sieve_core::index::{Index, SearchConfig};
use sieve_net::Client;

use crate::error::Result;

pub trait Backend: Sync {
    /// Top-k `(id, score)` and the number of partitions scanned.
    fn search(&self, x: &[f32], cfg: &SearchConfig) -> Result<(Vec<(u64, f32)>, usize)>;
    fn insert(&self, id: u64, v: &[f32]) -> Result<()>;
    fn delete(&self, ids: &[u64]) -> Result<()>;
    fn n_partitions(&self) -> Result<usize>;
    /// Ids that are stored and not deleted.
    fn live_len(&self) -> Result<usize>;
}

impl Backend for Index {
    fn search(&self, x: &[f32], cfg: &SearchConfig) -> Result<(Vec<(u64, f32)>, usize)> {
        let out = Index::search(self, x, cfg)?;
        Ok((out.results, out.partitions_scanned))
    }

    fn insert(&self, id: u64, v: &[f32]) -> Result<()> {
        Index::insert(self, id, v)?;
        Ok(())
    }

    fn delete(&self, ids: &[u64]) -> Result<()> {
        self.delete_many(ids);
        Ok(())
    }

    fn n_partitions(&self) -> Result<usize> {
        Ok(self.insert_params().n_partitions())
    }

    fn live_len(&self) -> Result<usize> {
        Ok(self.len())
    }
}

impl Backend for Client {
    fn search(&self, x: &[f32], cfg: &SearchConfig) -> Result<(Vec<(u64, f32)>, usize)> {
        let out = Client::search(self, x, cfg)?;
        Ok((out.results, out.partitions_scanned))
    }

    fn insert(&self, id: u64, v: &[f32]) -> Result<()> {
        Client::insert(self, id, v)?;
        Ok(())
    }

    fn delete(&self, ids: &[u64]) -> Result<()> {
        Client::delete(self, ids)?;
        Ok(())
    }

    fn n_partitions(&self) -> Result<usize> {
        Ok(self.index_stats(0, false)?.n_partitions)
    }

    fn live_len(&self) -> Result<usize> {
        Ok(self.index_stats(0, false)?.vectors)
    }
}

/// A configuration that scans every partition and returns every live id.
pub fn exhaustive_config(b: &dyn Backend) -> Result<SearchConfig> {
    let live = b.live_len()?.max(1);
    Ok(SearchConfig { use_q8: false, ..SearchConfig::new(live, 1, b.n_partitions()?) })
}
