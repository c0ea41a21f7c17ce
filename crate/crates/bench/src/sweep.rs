//! Recall and throughput over a grid of search configurations.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sieve_core::index::SearchConfig;
use sieve_core::Matrix;

use crate::backend::Backend;
use crate::error::{BenchError, Result};
use crate::gt::{recall_at, GroundTruth};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Concurrent request loops.
    pub clients: usize,
    /// Queries issued before timing starts.
    pub warmup: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { clients: 1, warmup: 1000 }
    }
}

/// The cartesian grid `nprobe x k_factor x et` at a fixed `k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub k: usize,
    pub nprobe: Vec<usize>,
    pub k_factor: Vec<usize>,
    /// Early-termination settings; `None` is fixed-nprobe search.
    #[serde(default = "no_et")]
    pub early_termination: Vec<Option<(Option<f32>, usize)>>,
    #[serde(default)]
    pub use_q8: Option<bool>,
}

fn no_et() -> Vec<Option<(Option<f32>, usize)>> {
    vec![None]
}

impl SweepGrid {
    pub fn configs(&self) -> Vec<SearchConfig> {
        let mut out = Vec::new();
        for &nprobe in &self.nprobe {
            for &k_factor in &self.k_factor {
                for et in &self.early_termination {
                    let mut cfg = SearchConfig::new(self.k, k_factor, nprobe);
                    if let Some(q8) = self.use_q8 {
                        cfg.use_q8 = q8;
                    }
                    if let Some((t, nt)) = et {
                        cfg = cfg.with_early_termination(*t, *nt);
                    }
                    out.push(cfg);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub nprobe: usize,
    pub k_factor: usize,
    pub et_t: Option<f32>,
    pub et_nt: Option<usize>,
    pub recall: f64,
    pub mean_partitions: f64,
    pub queries: usize,
    pub qps: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

/// Results of one timed pass over the queries.
#[derive(Debug, Clone)]
pub struct Measured {
    pub results: Vec<Vec<u64>>,
    pub partitions: Vec<usize>,
    pub latencies: Vec<Duration>,
    pub wall: Duration,
}

/// Run every query once with `clients` loops pulling from a shared
/// counter. Results are stored by query index.
pub fn run_queries(b: &dyn Backend, queries: &Matrix, cfg: &SearchConfig, clients: usize) -> Result<Measured> {
    let n = queries.rows();
    let next = AtomicUsize::new(0);
    let start = Instant::now();
    let per_client: Vec<Result<Vec<(usize, Vec<u64>, usize, Duration)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..clients.max(1))
            .map(|_| {
                let next = &next;
                s.spawn(move || {
                    let mut out = Vec::new();
                    loop {
                        let q = next.fetch_add(1, Ordering::Relaxed);
                        if q >= n {
                            return Ok(out);
                        }
                        let t = Instant::now();
                        let (res, parts) = b.search(queries.row(q), cfg)?;
                        out.push((q, res.into_iter().map(|r| r.0).collect(), parts, t.elapsed()));
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("query loop panicked")).collect()
    });
    let wall = start.elapsed();
    let mut results = vec![Vec::new(); n];
    let mut partitions = vec![0; n];
    let mut latencies = vec![Duration::ZERO; n];
    for chunk in per_client {
        for (q, res, parts, lat) in chunk? {
            results[q] = res;
            partitions[q] = parts;
            latencies[q] = lat;
        }
    }
    Ok(Measured { results, partitions, latencies, wall })
}

fn percentile_ms(sorted: &[Duration], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1].as_secs_f64() * 1e3
}

pub fn sweep(
    b: &dyn Backend,
    queries: &Matrix,
    gt: &GroundTruth,
    configs: &[SearchConfig],
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if gt.len() != queries.rows() {
        return Err(BenchError::InvalidArgument(format!(
            "{} queries but ground truth for {}",
            queries.rows(),
            gt.len()
        )));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        if opts.warmup > 0 && queries.rows() > 0 {
            let idx: Vec<usize> = (0..opts.warmup).map(|i| i % queries.rows()).collect();
            run_queries(b, &queries.select_rows(&idx), cfg, opts.clients)?;
        }
        let m = run_queries(b, queries, cfg, opts.clients)?;
        let mut lat = m.latencies.clone();
        lat.sort_unstable();
        let n = queries.rows();
        rows.push(SweepRow {
            nprobe: cfg.nprobe,
            k_factor: cfg.k_factor,
            et_t: cfg.et_enabled.then(|| cfg.et_threshold()),
            et_nt: cfg.et_enabled.then_some(cfg.et_nt),
            recall: recall_at(&m.results, gt, cfg.k),
            mean_partitions: m.partitions.iter().sum::<usize>() as f64 / n.max(1) as f64,
            queries: n,
            qps: n as f64 / m.wall.as_secs_f64().max(1e-9),
            p50_ms: percentile_ms(&lat, 0.5),
            p99_ms: percentile_ms(&lat, 0.99),
        });
        log::info!("nprobe={} k_factor={} recall={:.4}", cfg.nprobe, cfg.k_factor, rows.last().expect("pushed").recall);
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
