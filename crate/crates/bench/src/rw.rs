//! Concurrent mixed read/write workloads with a post-run audit.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use dashmap::DashMap;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sieve_core::index::SearchConfig;
use sieve_core::{Dataset, Matrix, Metric};

use crate::backend::{exhaustive_config, Backend};
use crate::error::{BenchError, Result};
use crate::gt::ground_truth;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Fraction of operations that are searches.
    pub read_ratio: f64,
    /// Fraction of writes that are inserts; the rest are deletes.
    pub insert_share: f64,
    pub clients: usize,
    /// Run for this long...
    pub duration: Option<Duration>,
    /// ...or until this many operations have been issued.
    pub ops: Option<usize>,
    pub search: SearchConfig,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(read_ratio: f64, clients: usize, search: SearchConfig) -> Self {
        Self { read_ratio, insert_share: 1.0, clients, duration: None, ops: None, search, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.read_ratio) || !unit(self.insert_share) {
            return Err(BenchError::InvalidArgument("read_ratio and insert_share must lie in [0, 1]".into()));
        }
        if self.clients == 0 {
            return Err(BenchError::InvalidArgument("need at least one client".into()));
        }
        if self.duration.is_none() && self.ops.is_none() {
            return Err(BenchError::InvalidArgument("give a duration or an operation count".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RwReport {
    pub reads: usize,
    pub inserts: usize,
    pub deletes: usize,
    pub errors: usize,
    pub elapsed_s: f64,
    /// All completed operations per second.
    pub throughput: f64,
    /// Recall of the reads against exact neighbours of the final state.
    pub recall: f64,
    /// Results containing an id whose delete was acknowledged before the
    /// search started.
    pub tombstone_violations: usize,
    /// Acknowledged, never deleted inserts missing from an exhaustive search.
    pub lost_inserts: usize,
    /// Ids returned by the exhaustive audit that should not be live.
    pub unexpected_ids: usize,
    pub final_live: usize,
    pub expected_live: usize,
}

impl RwReport {
    pub fn is_sound(&self) -> bool {
        self.errors == 0
            && self.tombstone_violations == 0
            && self.lost_inserts == 0
            && self.unexpected_ids == 0
            && self.final_live == self.expected_live
    }
}

struct Read {
    query: usize,
    ids: Vec<u64>,
}

/// Drive `spec` against `b`, which must hold exactly `base` when called.
/// Inserted vectors cycle through `pool` with fresh ids above every base id.
pub fn run_readwrite(
    b: &dyn Backend,
    base: &Dataset,
    queries: &Matrix,
    pool: &Matrix,
    metric: Metric,
    spec: &WorkloadSpec,
) -> Result<RwReport> {
    spec.validate()?;
    if queries.rows() == 0 || (spec.read_ratio < 1.0 && spec.insert_share > 0.0 && pool.rows() == 0) {
        return Err(BenchError::InvalidArgument("need queries, and insert vectors when writing".into()));
    }
    let first_new = base.ids().iter().max().map_or(0, |m| m + 1);
    let next_id = AtomicU64::new(first_new);
    let issued = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let errors = AtomicUsize::new(0);
    let deleted: DashMap<u64, Instant> = DashMap::new();
    let inserted: DashMap<u64, usize> = DashMap::new();
    let reads: Mutex<Vec<Read>> = Mutex::new(Vec::new());
    let violations = AtomicUsize::new(0);
    let (n_reads, n_inserts, n_deletes) = (AtomicUsize::new(0), AtomicUsize::new(0), AtomicUsize::new(0));

    let start = Instant::now();
    std::thread::scope(|s| {
        for c in 0..spec.clients {
            let (next_id, issued, stop, errors, deleted, inserted, reads, violations) =
                (&next_id, &issued, &stop, &errors, &deleted, &inserted, &reads, &violations);
            let (n_reads, n_inserts, n_deletes) = (&n_reads, &n_inserts, &n_deletes);
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(c as u64));
                let mut local_reads = Vec::new();
                loop {
                    if stop.load(Ordering::Relaxed) || spec.duration.is_some_and(|d| start.elapsed() >= d) {
                        break;
                    }
                    if let Some(limit) = spec.ops {
                        if issued.fetch_add(1, Ordering::Relaxed) >= limit {
                            break;
                        }
                    }
                    if rng.random::<f64>() < spec.read_ratio {
                        let q = rng.random_range(0..queries.rows());
                        let t0 = Instant::now();
                        match b.search(queries.row(q), &spec.search) {
                            Ok((res, _)) => {
                                let ids: Vec<u64> = res.into_iter().map(|r| r.0).collect();
                                let bad = ids.iter().filter(|id| deleted.get(id).is_some_and(|t| *t < t0)).count();
                                violations.fetch_add(bad, Ordering::Relaxed);
                                local_reads.push(Read { query: q, ids });
                                n_reads.fetch_add(1, Ordering::Relaxed);
                            }
                            Err(e) => {
                                log::error!("search failed: {e}");
                                errors.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    } else if rng.random::<f64>() < spec.insert_share {
                        let id = next_id.fetch_add(1, Ordering::Relaxed);
                        let row = ((id - first_new) as usize) % pool.rows();
                        match b.insert(id, pool.row(row)) {
                            Ok(()) => {
                                inserted.insert(id, row);
                                n_inserts.fetch_add(1, Ordering::Relaxed);
                            }
                            Err(e) => {
                                log::error!("insert of {id} failed: {e}");
                                errors.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    } else {
                        // delete a base id; re-deleting is a no-op
                        let id = base.ids()[rng.random_range(0..base.len())];
                        match b.delete(&[id]) {
                            Ok(()) => {
                                deleted.entry(id).or_insert_with(Instant::now);
                                n_deletes.fetch_add(1, Ordering::Relaxed);
                            }
                            Err(e) => {
                                log::error!("delete of {id} failed: {e}");
                                errors.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    }
                }
                reads.lock().extend(local_reads);
            });
        }
    });
    stop.store(true, Ordering::Relaxed);
    let elapsed = start.elapsed();

    // final state: base minus deletes plus acknowledged inserts
    let mut live_rows: Vec<Vec<f32>> = Vec::new();
    let mut live_ids: Vec<u64> = Vec::new();
    for (id, v) in base.iter() {
        if !deleted.contains_key(&id) {
            live_ids.push(id);
            live_rows.push(v.to_vec());
        }
    }
    let mut new_ids: Vec<(u64, usize)> = inserted.iter().map(|e| (*e.key(), *e.value())).collect();
    new_ids.sort_unstable();
    for &(id, row) in &new_ids {
        live_ids.push(id);
        live_rows.push(pool.row(row).to_vec());
    }
    let expected: HashSet<u64> = live_ids.iter().copied().collect();

    let audit_cfg = exhaustive_config(b)?;
    let (all, _) = b.search(queries.row(0), &audit_cfg)?;
    let found: HashSet<u64> = all.iter().map(|r| r.0).collect();
    let lost_inserts = new_ids.iter().filter(|(id, _)| !found.contains(id)).count();
    let unexpected_ids = found.difference(&expected).count();

    let reads = reads.into_inner();
    let recall = if reads.is_empty() || live_ids.is_empty() {
        0.0
    } else {
        let k = spec.search.k;
        let final_ds = Dataset::new(Matrix::from_rows(&live_rows)?, live_ids.clone())?;
        let used: Vec<usize> = {
            let mut u: Vec<usize> = reads.iter().map(|r| r.query).collect::<HashSet<_>>().into_iter().collect();
            u.sort_unstable();
            u
        };
        let gt = ground_truth(&final_ds, &queries.select_rows(&used), k, metric)?;
        let slot: std::collections::HashMap<usize, usize> = used.iter().enumerate().map(|(i, &q)| (q, i)).collect();
        let total: f64 = reads
            .iter()
            .map(|r| {
                let truth: HashSet<u64> = gt.ids[slot[&r.query]].iter().copied().collect();
                r.ids.iter().take(k).filter(|id| truth.contains(id)).count() as f64 / k as f64
            })
            .sum();
        total / reads.len() as f64
    };

    let done = n_reads.load(Ordering::Relaxed) + n_inserts.load(Ordering::Relaxed) + n_deletes.load(Ordering::Relaxed);
    Ok(RwReport {
        reads: n_reads.into_inner(),
        inserts: n_inserts.into_inner(),
        deletes: n_deletes.into_inner(),
        errors: errors.into_inner(),
        elapsed_s: elapsed.as_secs_f64(),
        throughput: done as f64 / elapsed.as_secs_f64().max(1e-9),
        recall,
        tombstone_violations: violations.into_inner(),
        lost_inserts,
        unexpected_ids,
        final_live: b.live_len()?,
        expected_live: expected.len(),
    })
}
