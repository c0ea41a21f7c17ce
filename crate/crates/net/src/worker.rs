//! In-process worker state. The HTTP layer in [`crate::server`] is a thin
//! wrapper over these types.

use std::collections::hash_map::DefaultHasher;
use std::fs::{self, File};
use std::hash::Hasher;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::RwLock;
use sieve_core::index::{read_manifest, FilterIndex, FullVectorStore, Manifest, ParamSet, SearchConfig};
use sieve_core::ivf::{PartitionSet, TopK};
use sieve_core::pq::PqCode;
use sieve_core::vector::ensure_finite;
use sieve_core::{Matrix, Metric};

use crate::config::{BatchConfig, Sharding};
use crate::error::{NetError, Result};
use crate::wire::IndexStats;

/// Filter-stage output with the partition of every candidate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterOutput {
    /// `(id, approximate score, pid)`, best first.
    pub candidates: Vec<(u64, f32, u32)>,
    pub partitions_scanned: usize,
}

/// Stable fingerprint of a parameter set's binary image.
pub fn params_digest(p: &ParamSet) -> String {
    let mut bytes = Vec::new();
    p.write_to(&mut bytes).expect("writing to memory");
    let mut h = DefaultHasher::new();
    h.write(&bytes);
    format!("{:016x}", h.finish())
}

type Slot = Arc<RwLock<Option<Arc<FilterIndex>>>>;

struct Job {
    x: Vec<f32>,
    cfg: SearchConfig,
    reply: Sender<Result<FilterOutput>>,
}

#[derive(Default)]
struct BatchCounters {
    batches: AtomicU64,
    largest: AtomicUsize,
}

/// A replica of the compressed index. Filter requests go through a queue
/// drained by batching threads; writes apply directly.
pub struct IndexWorker {
    slot: Slot,
    queue: Option<Sender<Job>>,
    threads: Vec<JoinHandle<()>>,
    counters: Arc<BatchCounters>,
}

impl IndexWorker {
    /// A worker with no index yet. Every request answers "not ready"
    /// until [`IndexWorker::set_index`] is called.
    pub fn empty(batch: BatchConfig) -> Self {
        let slot: Slot = Arc::new(RwLock::new(None));
        let counters = Arc::new(BatchCounters::default());
        let (tx, rx) = crossbeam_channel::unbounded();
        let threads = (0..batch.threads.max(1))
            .map(|i| {
                let (rx, slot, counters) = (rx.clone(), slot.clone(), counters.clone());
                std::thread::Builder::new()
                    .name(format!("filter-batch-{i}"))
                    .spawn(move || drain(rx, slot, batch, counters))
                    .expect("spawning batch thread")
            })
            .collect();
        Self { slot, queue: Some(tx), threads, counters }
    }

    pub fn new(index: FilterIndex, batch: BatchConfig) -> Self {
        let w = Self::empty(batch);
        w.set_index(index);
        w
    }

    pub fn from_checkpoint(dir: impl AsRef<Path>, batch: BatchConfig) -> Result<Self> {
        Ok(Self::new(FilterIndex::load(dir)?, batch))
    }

    pub fn set_index(&self, index: FilterIndex) {
        *self.slot.write() = Some(Arc::new(index));
    }

    pub fn index(&self) -> Result<Arc<FilterIndex>> {
        self.slot.read().clone().ok_or_else(|| NetError::NotReady("no index loaded".into()))
    }

    pub fn filter(&self, x: Vec<f32>, cfg: SearchConfig) -> Result<FilterOutput> {
        self.filter_many(vec![(x, cfg)]).pop().expect("one reply per request")
    }

    /// Queue every request before waiting, so they may share batches.
    pub fn filter_many(&self, requests: Vec<(Vec<f32>, SearchConfig)>) -> Vec<Result<FilterOutput>> {
        let queue = self.queue.as_ref().expect("queue lives as long as the worker");
        let replies: Vec<_> = requests
            .into_iter()
            .map(|(x, cfg)| {
                let (tx, rx) = crossbeam_channel::bounded(1);
                queue.send(Job { x, cfg, reply: tx }).expect("batch threads outlive the queue");
                rx
            })
            .collect();
        replies
            .into_iter()
            .map(|rx| rx.recv().unwrap_or_else(|_| Err(NetError::Internal("batch thread exited".into()))))
            .collect()
    }

    /// Partition and code for a new vector under the insert parameters.
    pub fn encode(&self, id: u64, v: &[f32]) -> Result<(usize, PqCode)> {
        let index = self.index()?;
        if index.partitions().contains(id) {
            return Err(NetError::Duplicate(id));
        }
        Ok(index.encode(v)?)
    }

    pub fn apply(&self, id: u64, pid: usize, code: &PqCode) -> Result<()> {
        let index = self.index()?;
        if pid >= index.partitions().num_partitions() {
            return Err(NetError::BadRequest(format!("partition {pid} out of range")));
        }
        if code.m() != index.partitions().m() {
            return Err(NetError::BadRequest(format!("code has {} subspaces, index {}", code.m(), index.partitions().m())));
        }
        Ok(index.add_encoded(id, pid, code)?)
    }

    pub fn delete(&self, ids: &[u64]) -> Result<usize> {
        Ok(self.index()?.delete(ids))
    }

    /// Check (and unless `dry_run`, swap in) new search parameters.
    pub fn install(&self, params: ParamSet, dry_run: bool) -> Result<String> {
        let index = self.index()?;
        index.insert_params().check_compatible(&params)?;
        let digest = params_digest(&params);
        if !dry_run {
            index.install_search_params(params)?;
            log::info!("installed search parameters {digest}");
        }
        Ok(digest)
    }

    pub fn checkpoint(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        Ok(self.index()?.checkpoint(dir)?)
    }

    pub fn stats(&self, detail: bool) -> IndexStats {
        let batches = self.counters.batches.load(Ordering::Relaxed);
        let largest_batch = self.counters.largest.load(Ordering::Relaxed);
        match self.slot.read().clone() {
            None => IndexStats {
                ready: false,
                dim: 0,
                metric: None,
                n_partitions: 0,
                vectors: 0,
                partition_lens: Vec::new(),
                params_digest: String::new(),
                batches,
                largest_batch,
                tombstones: None,
            },
            Some(index) => {
                let parts = index.partitions();
                IndexStats {
                    ready: true,
                    dim: index.dim(),
                    metric: Some(index.metric()),
                    n_partitions: parts.num_partitions(),
                    vectors: parts.live_len(),
                    partition_lens: parts.lens(),
                    params_digest: params_digest(&index.search_params()),
                    batches,
                    largest_batch,
                    tombstones: detail.then(|| parts.tombstones().iter().map(u64::to_string).collect()),
                }
            }
        }
    }
}

impl Drop for IndexWorker {
    fn drop(&mut self) {
        self.queue.take();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn drain(rx: Receiver<Job>, slot: Slot, cfg: BatchConfig, counters: Arc<BatchCounters>) {
    let cap = cfg.max_batch.max(1);
    while let Ok(first) = rx.recv() {
        let mut jobs = vec![first];
        while jobs.len() < cap {
            match rx.try_recv() {
                Ok(j) => jobs.push(j),
                Err(_) => break,
            }
        }
        // a lone request runs at once; only a queue that is already backed
        // up waits for stragglers
        if jobs.len() > 1 {
            let deadline = Instant::now() + cfg.window;
            while jobs.len() < cap {
                match rx.recv_deadline(deadline) {
                    Ok(j) => jobs.push(j),
                    Err(_) => break,
                }
            }
        }
        counters.batches.fetch_add(1, Ordering::Relaxed);
        counters.largest.fetch_max(jobs.len(), Ordering::Relaxed);
        run_batch(&slot, jobs);
    }
}

fn run_batch(slot: &Slot, jobs: Vec<Job>) {
    let Some(index) = slot.read().clone() else {
        for j in jobs {
            let _ = j.reply.send(Err(NetError::NotReady("no index loaded".into())));
        }
        return;
    };
    let d = index.dim();
    let (good, bad): (Vec<Job>, Vec<Job>) = jobs.into_iter().partition(|j| j.x.len() == d);
    for j in bad {
        let msg = format!("dimension mismatch: expected {d}, got {}", j.x.len());
        let _ = j.reply.send(Err(NetError::BadRequest(msg)));
    }
    if good.is_empty() {
        return;
    }
    let mut data = Vec::with_capacity(good.len() * d);
    for j in &good {
        data.extend_from_slice(&j.x);
    }
    let xs = Matrix::from_vec(good.len(), d, data).expect("rows checked above");
    let cfgs: Vec<SearchConfig> = good.iter().map(|j| j.cfg).collect();
    match index.filter_batch(&xs, &cfgs) {
        Ok(results) => {
            for (j, r) in good.into_iter().zip(results) {
                let out = r.map_err(NetError::from).map(|f| FilterOutput {
                    candidates: f
                        .candidates
                        .into_iter()
                        .map(|(id, s)| (id, s, index.partitions().partition_of(id).unwrap_or(0) as u32))
                        .collect(),
                    partitions_scanned: f.partitions_scanned,
                });
                let _ = j.reply.send(out);
            }
        }
        Err(e) => {
            for j in good {
                let _ = j.reply.send(Err(NetError::Internal(e.to_string())));
            }
        }
    }
}

/// A shard of the full-precision vectors.
pub struct RefineWorker {
    store: FullVectorStore,
    metric: Metric,
    deleted: AtomicUsize,
}

impl RefineWorker {
    pub fn new(d: usize, metric: Metric) -> Self {
        Self::from_store(FullVectorStore::new(d), metric)
    }

    pub fn from_store(store: FullVectorStore, metric: Metric) -> Self {
        Self { store, metric, deleted: AtomicUsize::new(0) }
    }

    /// Shard `shard` of `n_shards` cut out of a full index checkpoint.
    pub fn from_index_checkpoint(dir: impl AsRef<Path>, shard: usize, n_shards: usize, sharding: &Sharding) -> Result<Self> {
        let dir = dir.as_ref();
        if shard >= n_shards {
            return Err(NetError::Config(format!("shard {shard} of {n_shards}")));
        }
        let manifest = read_manifest(dir)?;
        let full = FullVectorStore::read_from(&mut BufReader::new(File::open(dir.join("full.bin")).map_err(io_err)?))?;
        let parts = match sharding {
            Sharding::ById => None,
            Sharding::ByIvf { partition_map } => {
                if partition_map.len() != manifest.n_partitions {
                    return Err(NetError::Config(format!(
                        "partition map covers {} partitions, index has {}",
                        partition_map.len(),
                        manifest.n_partitions
                    )));
                }
                let file = File::open(dir.join("partitions.bin")).map_err(io_err)?;
                Some(PartitionSet::read_from(&mut BufReader::new(file))?)
            }
        };
        let store = FullVectorStore::new(full.dim());
        for id in full.ids() {
            let pid = match &parts {
                Some(p) => p.partition_of(id).ok_or_else(|| NetError::Internal(format!("id {id} has no partition")))?,
                None => 0,
            };
            if sharding.route(id, pid, n_shards) == shard {
                store.insert(id, &full.get(id).expect("listed id"))?;
            }
        }
        Ok(Self::from_store(store, manifest.metric))
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn store(&self) -> &FullVectorStore {
        &self.store
    }

    /// Exact top-`k` of the ids this shard holds; the rest come back as
    /// missing.
    pub fn refine(&self, x: &[f32], ids: &[u64], k: usize) -> Result<(Vec<(u64, f32)>, Vec<u64>)> {
        if x.len() != self.dim() {
            return Err(NetError::BadRequest(format!("dimension mismatch: expected {}, got {}", self.dim(), x.len())));
        }
        ensure_finite(x)?;
        let mut top = TopK::new(k);
        let mut missing = Vec::new();
        for &id in ids {
            match self.store.score(id, x, self.metric) {
                Some(s) => {
                    top.offer(s, id);
                }
                None => missing.push(id),
            }
        }
        Ok((top.into_sorted(), missing))
    }

    pub fn insert(&self, id: u64, v: &[f32]) -> Result<()> {
        Ok(self.store.insert(id, v)?)
    }

    pub fn delete(&self, ids: &[u64]) -> usize {
        let n = ids.iter().filter(|&&id| self.store.remove(id)).count();
        self.deleted.fetch_add(n, Ordering::Relaxed);
        n
    }

    /// Write the shard as `full.bin` inside `dir`.
    pub fn checkpoint(&self, dir: impl AsRef<Path>) -> Result<usize> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err)?;
        let mut w = BufWriter::new(File::create(dir.join("full.bin")).map_err(io_err)?);
        self.store.write_to(&mut w, |_| false)?;
        w.flush().map_err(io_err)?;
        Ok(self.store.len())
    }

    pub fn stats(&self) -> crate::wire::RefineStats {
        crate::wire::RefineStats {
            dim: self.dim(),
            metric: self.metric,
            vectors: self.store.len(),
            deleted: self.deleted.load(Ordering::Relaxed),
        }
    }
}

fn io_err(e: std::io::Error) -> NetError {
    NetError::Internal(e.to_string())
}
