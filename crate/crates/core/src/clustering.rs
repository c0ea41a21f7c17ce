//! k-means used for IVF centroids and PQ sub-codebooks, plus seeded sampling.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::vector::{l2_sqr, Dataset, Matrix, Metric};

/// Points per rayon task in the assignment step.
const ASSIGN_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Stop once total squared centroid shift falls below `tol` times the
    /// total squared centroid norm.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, max_iters: 25, seed, tol: 1e-6 }
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }
}

#[derive(Debug, Clone)]
pub struct KMeansOutput {
    pub centroids: Matrix,
    /// Sum of squared distances measured at every assignment step.
    pub sse_history: Vec<f64>,
    /// Final assignment of every input row.
    pub labels: Vec<usize>,
}

/// Train k-means (k-means++ seeding, Lloyd iterations, squared L2).
pub fn kmeans_train(data: &Matrix, cfg: &KMeansConfig) -> Result<Matrix> {
    Ok(kmeans_train_traced(data, cfg)?.centroids)
}

pub fn kmeans_train_traced(data: &Matrix, cfg: &KMeansConfig) -> Result<KMeansOutput> {
    validate(data, cfg.k, cfg.max_iters)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = kmeans_pp(data, cfg.k, &mut rng);
    Ok(lloyd(data, init, cfg.max_iters, cfg.tol))
}

/// Lloyd iterations starting from caller-supplied centroids. SSE never
/// exceeds the SSE of `init` on `data`.
pub fn kmeans_refine(data: &Matrix, init: Matrix, max_iters: usize, tol: f64) -> Result<KMeansOutput> {
    validate(data, init.rows(), max_iters.max(1))?;
    check_dim(data.cols(), init.cols())?;
    Ok(lloyd(data, init, max_iters, tol))
}

fn validate(data: &Matrix, k: usize, max_iters: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    if k > data.rows() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {} points",
            data.rows()
        )));
    }
    if !data.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(())
}

fn kmeans_pp(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let mut centroids = Matrix::zeros(0, data.cols());
    let first = rng.random_range(0..n);
    centroids.push_row(data.row(first)).expect("same width");
    let mut chosen = vec![false; n];
    chosen[first] = true;

    let mut d2: Vec<f64> = data.iter_rows().map(|r| l2_sqr(r, data.row(first)) as f64).collect();
    while centroids.rows() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // float round-off can run past the end; fall back to the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // fewer distinct points than k: reuse unchosen rows in order
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = data.row(pick).to_vec();
        centroids.push_row(&c).expect("same width");
        for (i, r) in data.iter_rows().enumerate() {
            let d = l2_sqr(r, &c) as f64;
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Nearest centroid by squared L2; ties go to the lowest index.
#[inline]
pub fn nearest_l2(centroids: &Matrix, x: &[f32]) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (i, c) in centroids.iter_rows().enumerate() {
        let d = l2_sqr(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign_all(data: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f32>) {
    let n = data.rows();
    let cols = data.cols();
    let mut labels = vec![0usize; n];
    let mut dists = vec![0f32; n];
    labels
        .par_chunks_mut(ASSIGN_CHUNK)
        .zip(dists.par_chunks_mut(ASSIGN_CHUNK))
        .enumerate()
        .for_each(|(chunk, (ls, ds))| {
            let base = chunk * ASSIGN_CHUNK;
            for (o, (l, d)) in ls.iter_mut().zip(ds.iter_mut()).enumerate() {
                let row = &data.as_slice()[(base + o) * cols..(base + o + 1) * cols];
                let (i, dist) = nearest_l2(centroids, row);
                *l = i;
                *d = dist;
            }
        });
    (labels, dists)
}

fn lloyd(data: &Matrix, mut centroids: Matrix, max_iters: usize, tol: f64) -> KMeansOutput {
    let k = centroids.rows();
    let dim = data.cols();
    let mut sse_history = Vec::new();
    let mut prev_labels: Option<Vec<usize>> = None;
    let mut labels = Vec::new();

    for _ in 0..max_iters {
        let (new_labels, mut dists) = assign_all(data, &centroids);
        sse_history.push(dists.iter().map(|&d| d as f64).sum());
        if prev_labels.as_ref() == Some(&new_labels) {
            labels = new_labels;
            break;
        }

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (row, &l) in data.iter_rows().zip(&new_labels) {
            counts[l] += 1;
            for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row) {
                *s += v as f64;
            }
        }

        let mut next = Matrix::zeros(k, dim);
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (o, s) in next.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *o = (*s * inv) as f32;
            }
        }
        // Empty clusters take the point farthest from its own centroid.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = 0usize;
            for (i, &d) in dists.iter().enumerate() {
                if d > dists[far] {
                    far = i;
                }
            }
            next.row_mut(c).copy_from_slice(data.row(far));
            dists[far] = 0.0;
        }

        let shift: f64 = centroids
            .iter_rows()
            .zip(next.iter_rows())
            .map(|(a, b)| l2_sqr(a, b) as f64)
            .sum();
        let scale: f64 = centroids.as_slice().iter().map(|&v| (v as f64) * (v as f64)).sum();
        centroids = next;
        labels = new_labels.clone();
        prev_labels = Some(new_labels);
        if shift <= tol * scale.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    if labels.len() != data.rows() {
        labels = assign_all(data, &centroids).0;
    }
    KMeansOutput { centroids, sse_history, labels }
}

/// Index of the centroid with the highest similarity under `metric`;
/// ties go to the lowest index.
pub fn assign(centroids: &Matrix, x: &[f32], metric: Metric) -> Result<usize> {
    if centroids.rows() == 0 {
        return Err(Error::InvalidArgument("no centroids".into()));
    }
    check_dim(centroids.cols(), x.len())?;
    Ok(assign_unchecked(centroids, x, metric))
}

#[inline]
pub(crate) fn assign_unchecked(centroids: &Matrix, x: &[f32], metric: Metric) -> usize {
    let mut best = (0usize, f32::NEG_INFINITY);
    for (i, c) in centroids.iter_rows().enumerate() {
        let s = metric.score(x, c);
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// `n` distinct rows chosen uniformly without replacement, deterministic
/// under `seed`.
pub fn sample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {n} rows from a dataset of {}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, ds.len(), n).into_vec();
    Ok(ds.select(&picked))
}
