//! Exact nearest neighbours by exhaustive scan, and recall against them.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sieve_core::ivf::TopK;
use sieve_core::{Dataset, Matrix, Metric};

use crate::error::{BenchError, Result};

const MAGIC: &[u8; 5] = b"HKGT1";

/// Per query, the exact top-`k` ids and scores, best first with ties by
/// ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub k: usize,
    pub ids: Vec<Vec<u64>>,
    pub scores: Vec<Vec<f32>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn neighbors(&self, q: usize) -> &[u64] {
        &self.ids[q]
    }

    /// The first `k` neighbours of every query.
    pub fn truncated(&self, k: usize) -> GroundTruth {
        let k = k.min(self.k);
        GroundTruth {
            k,
            ids: self.ids.iter().map(|r| r[..k.min(r.len())].to_vec()).collect(),
            scores: self.scores.iter().map(|r| r[..k.min(r.len())].to_vec()).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        for (ids, scores) in self.ids.iter().zip(&self.scores) {
            w.write_all(&(ids.len() as u32).to_le_bytes())?;
            for id in ids {
                w.write_all(&id.to_le_bytes())?;
            }
            for s in scores {
                w.write_all(&s.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |msg: &str| BenchError::Format { path: "<ground truth>".into(), msg: msg.into() };
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(fmt("not a ground-truth file"));
        }
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4)?;
        let k = u32::from_le_bytes(b4) as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        let mut scores = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            r.read_exact(&mut b4)?;
            let len = u32::from_le_bytes(b4) as usize;
            if len > k {
                return Err(fmt("row longer than k"));
            }
            let mut row = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut b8)?;
                row.push(u64::from_le_bytes(b8));
            }
            let mut srow = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut b4)?;
                srow.push(f32::from_le_bytes(b4));
            }
            ids.push(row);
            scores.push(srow);
        }
        Ok(Self { k, ids, scores })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Exact top-`k` of every query over all of `ds`, queries in parallel.
pub fn ground_truth(ds: &Dataset, queries: &Matrix, k: usize, metric: Metric) -> Result<GroundTruth> {
    if queries.rows() > 0 && queries.cols() != ds.dim() {
        return Err(BenchError::InvalidArgument(format!(
            "queries have dimension {}, dataset {}",
            queries.cols(),
            ds.dim()
        )));
    }
    let rows: Vec<(Vec<u64>, Vec<f32>)> = (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let x = queries.row(q);
            let mut top = TopK::new(k);
            for (id, v) in ds.iter() {
                top.offer(metric.score(x, v), id);
            }
            top.into_sorted().into_iter().unzip()
        })
        .collect();
    let (ids, scores) = rows.into_iter().unzip();
    Ok(GroundTruth { k, ids, scores })
}

/// Mean over queries of `|top-k result ∩ top-k truth| / k`.
pub fn recall_at(results: &[Vec<u64>], gt: &GroundTruth, k: usize) -> f64 {
    if results.is_empty() || k == 0 {
        return 0.0;
    }
    let total: f64 = results
        .iter()
        .zip(&gt.ids)
        .map(|(res, truth)| {
            let truth: HashSet<u64> = truth.iter().take(k).copied().collect();
            res.iter().take(k).filter(|id| truth.contains(id)).count() as f64 / k as f64
        })
        .sum();
    total / results.len() as f64
}
