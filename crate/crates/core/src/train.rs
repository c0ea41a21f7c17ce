//! Learning the search-side transform and codebook.
//!
//! For a query `x` with neighbours `v_1..v_K` the objective compares three
//! softmax distributions over the neighbours:
//!
//! * `S_o`: scores of `x` against `v_i` in the original space,
//! * `S_r`: scores of `y = A'x + b'` against `u_i = A v_i + b`,
//! * `S_q`: scores of `y` against `w_i`, the reconstruction of `u_i` whose
//!   code indices come from the fixed codebook `C` but whose centroids are
//!   read from the learnable codebook `C'`.
//!
//! The loss is `KL(S_o || S_r) + lambda * KL(S_o || S_q)` summed over queries.
//! `A`, `b` and `C` are the insert-side parameters and never change.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bin::{expect_magic, read_f32s, read_u32, read_u64, read_u64s, to_len, write_f32s, write_u32, write_u64, write_u64s};
use crate::clustering::assign_unchecked;
use crate::error::{check_dim, Error, Result};
use crate::index::{Index, ParamSet, SearchConfig};
use crate::ivf::IvfCentroids;
use crate::pq::{PqCodebook, KSUB};
use crate::vector::{Matrix, Metric, Transform};

const TRAINING_SET_MAGIC: &[u8] = b"HKTS1";

/// Queries with their approximate neighbours. Rows `0..n_train` form the
/// training split and the rest the validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    queries: Matrix,
    query_ids: Vec<u64>,
    neighbor_ids: Vec<u64>,
    neighbors: Matrix,
    k: usize,
    n_train: usize,
}

impl TrainingSet {
    pub fn new(
        queries: Matrix,
        query_ids: Vec<u64>,
        neighbor_ids: Vec<u64>,
        neighbors: Matrix,
        k: usize,
        n_train: usize,
    ) -> Result<Self> {
        let n = queries.rows();
        if query_ids.len() != n || neighbor_ids.len() != n * k || neighbors.rows() != n * k {
            return Err(Error::InvalidArgument(format!(
                "{n} queries with K = {k} need {n} query ids and {} neighbours",
                n * k
            )));
        }
        if n > 0 {
            check_dim(queries.cols(), neighbors.cols())?;
        }
        if n_train > n {
            return Err(Error::InvalidArgument(format!("training split {n_train} exceeds {n} queries")));
        }
        Ok(Self { queries, query_ids, neighbor_ids, neighbors, k, n_train })
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn n_validation(&self) -> usize {
        self.len() - self.n_train
    }

    pub fn query(&self, i: usize) -> &[f32] {
        self.queries.row(i)
    }

    pub fn query_id(&self, i: usize) -> u64 {
        self.query_ids[i]
    }

    pub fn neighbor_ids(&self, i: usize) -> &[u64] {
        &self.neighbor_ids[i * self.k..(i + 1) * self.k]
    }

    /// The `K` neighbour vectors of query `i`.
    pub fn neighbors(&self, i: usize) -> Matrix {
        self.neighbors.select_rows(&(i * self.k..(i + 1) * self.k).collect::<Vec<_>>())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TRAINING_SET_MAGIC)?;
        write_u64(w, self.len() as u64)?;
        write_u32(w, self.k as u32)?;
        write_u32(w, self.dim() as u32)?;
        write_u64(w, self.n_train as u64)?;
        write_f32s(w, self.queries.as_slice())?;
        write_u64s(w, &self.query_ids)?;
        write_u64s(w, &self.neighbor_ids)?;
        write_f32s(w, self.neighbors.as_slice())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, TRAINING_SET_MAGIC)?;
        let n = to_len(read_u64(r)?, "query count")?;
        let k = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        let n_train = to_len(read_u64(r)?, "training split")?;
        let queries = Matrix::from_vec(n, d, read_f32s(r, to_len((n * d) as u64, "query values")?)?)?;
        let query_ids = read_u64s(r, n)?;
        let neighbor_ids = read_u64s(r, to_len((n * k) as u64, "neighbour count")?)?;
        let neighbors = Matrix::from_vec(n * k, d, read_f32s(r, to_len((n * k * d) as u64, "neighbour values")?)?)?;
        Self::new(queries, query_ids, neighbor_ids, neighbors, k, n_train)
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

/// Sample `n_s` stored vectors as queries and collect `k` neighbours for
/// each from the index itself, excluding the query's own id.
///
/// Queries whose search returns fewer than `k` other ids are dropped. The
/// last `val_fraction` of the (shuffled) queries form the validation split.
pub fn prepare_training_set(
    idx: &Index,
    n_s: usize,
    k: usize,
    nprobe: usize,
    k_factor: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<TrainingSet> {
    let ids = idx.full_store().ids();
    let live: Vec<u64> = ids.into_iter().filter(|&id| !idx.filter_index().partitions().is_deleted(id)).collect();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    if live.len() < k + 1 {
        return Err(Error::InvalidArgument(format!("K = {k} needs at least {} vectors, index has {}", k + 1, live.len())));
    }
    if n_s > live.len() {
        return Err(Error::InvalidArgument(format!("{n_s} queries requested from {} vectors", live.len())));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!("validation fraction {val_fraction} not in [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<u64> = rand::seq::index::sample(&mut rng, live.len(), n_s).into_iter().map(|i| live[i]).collect();

    let cfg = SearchConfig::new(k + 1, k_factor.max(1), nprobe.max(1));
    let store = idx.full_store();
    let rows: Vec<Option<(Vec<f32>, Vec<u64>)>> = picked
        .par_iter()
        .map(|&qid| {
            let x = store.get(qid).expect("sampled id is stored");
            let res = idx.search(&x, &cfg)?;
            let nb: Vec<u64> = res.results.iter().map(|r| r.0).filter(|&id| id != qid).take(k).collect();
            Ok((nb.len() == k).then_some((x, nb)))
        })
        .collect::<Result<_>>()?;

    let d = idx.dim();
    let mut queries = Matrix::zeros(0, d);
    let mut query_ids = Vec::new();
    let mut neighbor_ids = Vec::new();
    let mut neighbors = Matrix::zeros(0, d);
    let mut dropped = 0;
    for (qid, row) in picked.iter().zip(rows) {
        let Some((x, nb)) = row else {
            dropped += 1;
            continue;
        };
        queries.push_row(&x)?;
        query_ids.push(*qid);
        for id in nb {
            neighbors.push_row(&store.get(id).ok_or(Error::MissingId(id))?)?;
            neighbor_ids.push(id);
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} sampled queries with fewer than {k} neighbours");
    }
    let n = queries.rows();
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    TrainingSet::new(queries, query_ids, neighbor_ids, neighbors, k, n - n_val)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Stop once the validation loss improves by less than this.
    pub stop_delta: f64,
    /// Measure the improvement relative to the previous validation loss.
    pub stop_relative: bool,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 1e-4,
            batch: 512,
            max_epochs: 20,
            stop_delta: 1e-5,
            stop_relative: false,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || self.batch == 0 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need lambda >= 0, lr > 0, weight_decay >= 0 and batch >= 1 (got {}, {}, {}, {})",
                self.lambda, self.lr, self.weight_decay, self.batch
            )));
        }
        Ok(())
    }
}

/// Search-side transform `A', b'` and codebook `C'`, held in 64-bit floats
/// while training.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableParams {
    d: usize,
    d_r: usize,
    m: usize,
    dsub: usize,
    /// `d_r x d`, row `r` produces output coordinate `r`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `m x 16 x dsub`.
    pub c: Vec<f64>,
}

impl LearnableParams {
    pub fn from_params(p: &ParamSet) -> Self {
        Self {
            d: p.input_dim(),
            d_r: p.reduced_dim(),
            m: p.m(),
            dsub: p.pq.dsub(),
            a: p.transform.weights().as_slice().iter().map(|&v| v as f64).collect(),
            b: p.transform.bias().iter().map(|&v| v as f64).collect(),
            c: p.pq.as_slice().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn reduced_dim(&self) -> usize {
        self.d_r
    }

    pub fn transform(&self) -> Result<Transform> {
        let w = Matrix::from_vec(self.d_r, self.d, self.a.iter().map(|&v| v as f32).collect())?;
        Transform::new(w, self.b.iter().map(|&v| v as f32).collect())
    }

    pub fn codebook(&self) -> Result<PqCodebook> {
        PqCodebook::new(self.m, self.dsub, self.c.iter().map(|&v| v as f32).collect())
    }

    /// 32-bit parameter set using the given IVF centroids.
    pub fn to_param_set(&self, ivf: IvfCentroids) -> Result<ParamSet> {
        ParamSet::new(self.transform()?, ivf, self.codebook()?)
    }

    fn zeros_like(&self) -> Grads {
        Grads { a: vec![0.0; self.a.len()], b: vec![0.0; self.b.len()], c: vec![0.0; self.c.len()] }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d_r)
            .map(|r| {
                let row = &self.a[r * self.d..(r + 1) * self.d];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b[r]
            })
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.a.iter().chain(&self.b).chain(&self.c).all(|v| v.is_finite())
    }
}

/// Gradient of the loss, shaped like [`LearnableParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl Grads {
    fn add(&mut self, other: &Grads) {
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += y;
        }
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += y;
        }
        for (x, y) in self.c.iter_mut().zip(&other.c) {
            *x += y;
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self.a.iter_mut().chain(self.b.iter_mut()).chain(self.c.iter_mut()) {
            *v *= s;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    pub s_o: Vec<f64>,
    pub s_r: Vec<f64>,
    pub s_q: Vec<f64>,
}

/// Everything about one query that does not depend on the learnable
/// parameters.
#[derive(Debug, Clone)]
struct Sample {
    x: Vec<f64>,
    p: Vec<f64>,
    log_p: Vec<f64>,
    // fixed-side reductions of the neighbours, K x d_r
    u: Vec<f64>,
    // code indices under the fixed codebook, K x m
    codes: Vec<u8>,
}

fn score64(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::InnerProduct => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        Metric::EuclideanSquared => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
    }
}

/// Softmax with max subtraction, plus the log-probabilities.
fn log_softmax(s: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = s.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let log_p: Vec<f64> = s.iter().map(|v| v - lse).collect();
    (log_p.iter().map(|v| v.exp()).collect(), log_p)
}

fn kl(p: &[f64], log_p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_p)
        .zip(log_q)
        .map(|((&pi, &lp), &lq)| if pi > 0.0 { pi * (lp - lq) } else { 0.0 })
        .sum()
}

fn prepare_sample(x: &[f32], neighbors: &Matrix, fixed: &ParamSet, metric: Metric) -> Result<Sample> {
    let k = neighbors.rows();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 neighbours, got {k}")));
    }
    check_dim(fixed.input_dim(), x.len())?;
    check_dim(fixed.input_dim(), neighbors.cols())?;
    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let s_o: Vec<f64> = neighbors
        .iter_rows()
        .map(|v| score64(metric, &x64, &v.iter().map(|&t| t as f64).collect::<Vec<_>>()))
        .collect();
    let (p, log_p) = log_softmax(&s_o);
    let reduced = fixed.transform.apply_batch(neighbors)?;
    let mut codes = Vec::with_capacity(k * fixed.m());
    for row in reduced.iter_rows() {
        codes.extend(fixed.pq.encode_unchecked(row).indices());
    }
    let u = reduced.as_slice().iter().map(|&v| v as f64).collect();
    Ok(Sample { x: x64, p, log_p, u, codes })
}

/// Learnable-side quantities for one sample.
struct Forward {
    y: Vec<f64>,
    // reconstructions from C', K x d_r
    w: Vec<f64>,
    s_r: Vec<f64>,
    log_r: Vec<f64>,
    s_q: Vec<f64>,
    log_q: Vec<f64>,
}

fn forward(s: &Sample, learn: &LearnableParams, metric: Metric) -> Forward {
    let d_r = learn.d_r;
    let k = s.p.len();
    let y = learn.apply(&s.x);
    let mut w = vec![0.0; k * d_r];
    for i in 0..k {
        for j in 0..learn.m {
            let c = s.codes[i * learn.m + j] as usize;
            let src = &learn.c[(j * KSUB + c) * learn.dsub..(j * KSUB + c + 1) * learn.dsub];
            w[i * d_r + j * learn.dsub..i * d_r + (j + 1) * learn.dsub].copy_from_slice(src);
        }
    }
    let r_scores: Vec<f64> = (0..k).map(|i| score64(metric, &y, &s.u[i * d_r..(i + 1) * d_r])).collect();
    let q_scores: Vec<f64> = (0..k).map(|i| score64(metric, &y, &w[i * d_r..(i + 1) * d_r])).collect();
    let (s_r, log_r) = log_softmax(&r_scores);
    let (s_q, log_q) = log_softmax(&q_scores);
    Forward { y, w, s_r, log_r, s_q, log_q }
}

fn sample_loss(s: &Sample, f: &Forward, lambda: f64) -> f64 {
    let l_r = kl(&s.p, &s.log_p, &f.log_r);
    if lambda == 0.0 {
        return l_r;
    }
    l_r + lambda * kl(&s.p, &s.log_p, &f.log_q)
}

/// Adds this sample's gradient into `g` and returns its loss.
fn accumulate(s: &Sample, learn: &LearnableParams, lambda: f64, metric: Metric, g: &mut Grads) -> f64 {
    let f = forward(s, learn, metric);
    let (d, d_r, k) = (learn.d, learn.d_r, s.p.len());
    let mut gy = vec![0.0; d_r];
    for i in 0..k {
        let gr = f.s_r[i] - s.p[i];
        let u = &s.u[i * d_r..(i + 1) * d_r];
        for t in 0..d_r {
            gy[t] += gr * dscore_dy(metric, f.y[t], u[t]);
        }
        if lambda == 0.0 {
            continue;
        }
        let gq = lambda * (f.s_q[i] - s.p[i]);
        let w = &f.w[i * d_r..(i + 1) * d_r];
        for t in 0..d_r {
            gy[t] += gq * dscore_dy(metric, f.y[t], w[t]);
        }
        for j in 0..learn.m {
            let c = s.codes[i * learn.m + j] as usize;
            let base = (j * KSUB + c) * learn.dsub;
            for e in 0..learn.dsub {
                let t = j * learn.dsub + e;
                g.c[base + e] += gq * dscore_dw(metric, f.y[t], w[t]);
            }
        }
    }
    for r in 0..d_r {
        g.b[r] += gy[r];
        let row = &mut g.a[r * d..(r + 1) * d];
        for (a, &x) in row.iter_mut().zip(&s.x) {
            *a += gy[r] * x;
        }
    }
    sample_loss(s, &f, lambda)
}

#[inline]
fn dscore_dy(metric: Metric, y: f64, v: f64) -> f64 {
    match metric {
        Metric::InnerProduct => v,
        Metric::EuclideanSquared => -2.0 * (y - v),
    }
}

#[inline]
fn dscore_dw(metric: Metric, y: f64, w: f64) -> f64 {
    match metric {
        Metric::InnerProduct => y,
        Metric::EuclideanSquared => 2.0 * (y - w),
    }
}

/// The three score distributions for one query.
pub fn score_distributions(
    x: &[f32],
    neighbors: &Matrix,
    fixed: &ParamSet,
    learn: &LearnableParams,
    metric: Metric,
) -> Result<Distributions> {
    check_shapes(fixed, learn)?;
    let s = prepare_sample(x, neighbors, fixed, metric)?;
    let f = forward(&s, learn, metric);
    Ok(Distributions { s_o: s.p, s_r: f.s_r, s_q: f.s_q })
}

fn check_shapes(fixed: &ParamSet, learn: &LearnableParams) -> Result<()> {
    let a = (fixed.input_dim(), fixed.reduced_dim(), fixed.m(), fixed.pq.dsub());
    let b = (learn.d, learn.d_r, learn.m, learn.dsub);
    if a != b {
        return Err(Error::Incompatible(format!("learnable shape {b:?} does not match fixed {a:?}")));
    }
    Ok(())
}

fn prepare_rows(ts: &TrainingSet, rows: &[usize], fixed: &ParamSet, metric: Metric) -> Result<Vec<Sample>> {
    rows.par_iter()
        .map(|&i| {
            if i >= ts.len() {
                return Err(Error::InvalidArgument(format!("row {i} out of range")));
            }
            prepare_sample(ts.query(i), &ts.neighbors(i), fixed, metric)
        })
        .collect()
}

/// Summed loss over the given training-set rows.
pub fn loss(
    ts: &TrainingSet,
    rows: &[usize],
    fixed: &ParamSet,
    learn: &LearnableParams,
    lambda: f64,
    metric: Metric,
) -> Result<f64> {
    check_shapes(fixed, learn)?;
    let samples = prepare_rows(ts, rows, fixed, metric)?;
    Ok(samples.iter().map(|s| sample_loss(s, &forward(s, learn, metric), lambda)).sum())
}

/// Summed loss and its gradient over the given rows.
pub fn gradients(
    ts: &TrainingSet,
    rows: &[usize],
    fixed: &ParamSet,
    learn: &LearnableParams,
    lambda: f64,
    metric: Metric,
) -> Result<(f64, Grads)> {
    check_shapes(fixed, learn)?;
    let samples = prepare_rows(ts, rows, fixed, metric)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    Ok(batch_gradients(&refs, learn, lambda, metric))
}

const GRAD_CHUNK: usize = 16;

/// Chunks run in parallel and are summed in order, so results do not
/// depend on the thread count.
fn batch_gradients(samples: &[&Sample], learn: &LearnableParams, lambda: f64, metric: Metric) -> (f64, Grads) {
    let parts: Vec<(f64, Grads)> = samples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = learn.zeros_like();
            let l = chunk.iter().map(|s| accumulate(s, learn, lambda, metric, &mut g)).sum();
            (l, g)
        })
        .collect();
    let mut total = learn.zeros_like();
    let mut l = 0.0;
    for (pl, pg) in parts {
        l += pl;
        total.add(&pg);
    }
    (l, total)
}

fn mean_loss(samples: &[Sample], learn: &LearnableParams, lambda: f64, metric: Metric) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let parts: Vec<f64> = samples
        .par_chunks(GRAD_CHUNK)
        .map(|c| c.iter().map(|s| sample_loss(s, &forward(s, learn, metric), lambda)).sum())
        .collect();
    parts.iter().sum::<f64>() / samples.len() as f64
}

struct AdamW {
    lr: f64,
    wd: f64,
    step: i32,
    m: Grads,
    v: Grads,
}

impl AdamW {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, wd: f64, like: &LearnableParams) -> Self {
        Self { lr, wd, step: 0, m: like.zeros_like(), v: like.zeros_like() }
    }

    fn update(&mut self, p: &mut LearnableParams, g: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - Self::B1.powi(self.step);
        let bc2 = 1.0 - Self::B2.powi(self.step);
        let (lr, wd) = (self.lr, self.wd);
        let tensors = [
            (&mut p.a, &g.a, &mut self.m.a, &mut self.v.a),
            (&mut p.b, &g.b, &mut self.m.b, &mut self.v.b),
            (&mut p.c, &g.c, &mut self.m.c, &mut self.v.c),
        ];
        for (theta, grad, m, v) in tensors {
            for i in 0..theta.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * grad[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                theta[i] -= lr * wd * theta[i];
                theta[i] -= lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-query training loss; for epoch 0, the initial loss.
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: LearnableParams,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainOutput {
    pub fn initial_val_loss(&self) -> f64 {
        self.history[0].val_loss
    }

    pub fn best_val_loss(&self) -> f64 {
        self.history[self.best_epoch].val_loss
    }

    /// CSV with header `epoch,train_loss,val_loss,lr,lambda`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,lr,lambda")?;
        for e in &self.history {
            writeln!(w, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.lr, e.lambda)?;
        }
        Ok(())
    }
}

/// Train `A', b', C'` starting from `init`. Losses are reported as means
/// over queries. Returns the parameters of the epoch with the lowest
/// validation loss (epoch 0 being the starting point).
pub fn train(ts: &TrainingSet, init: &ParamSet, cfg: &TrainConfig, metric: Metric) -> Result<TrainOutput> {
    cfg.validate()?;
    if ts.n_train() == 0 || ts.n_validation() == 0 {
        return Err(Error::InvalidArgument(format!(
            "need non-empty training and validation splits (got {} and {})",
            ts.n_train(),
            ts.n_validation()
        )));
    }
    check_dim(init.input_dim(), ts.dim())?;
    let train_rows: Vec<usize> = (0..ts.n_train()).collect();
    let val_rows: Vec<usize> = (ts.n_train()..ts.len()).collect();
    let train_set = prepare_rows(ts, &train_rows, init, metric)?;
    let val_set = prepare_rows(ts, &val_rows, init, metric)?;

    let mut params = LearnableParams::from_params(init);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let initial = EpochLog {
        epoch: 0,
        train_loss: mean_loss(&train_set, &params, cfg.lambda, metric),
        val_loss: mean_loss(&val_set, &params, cfg.lambda, metric),
        lr: cfg.lr,
        lambda: cfg.lambda,
    };
    if !initial.val_loss.is_finite() || !initial.train_loss.is_finite() {
        return Err(Error::Diverged { epoch: 0 });
    }
    log::info!("epoch 0: train {:.6} val {:.6}", initial.train_loss, initial.val_loss);
    let mut history = vec![initial];
    let mut best = (0, params.clone());
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let refs: Vec<&Sample> = batch.iter().map(|&i| &train_set[i]).collect();
            let (l, mut g) = batch_gradients(&refs, &params, cfg.lambda, metric);
            if !l.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += l;
            g.scale(1.0 / batch.len() as f64);
            opt.update(&mut params, &g);
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let val = mean_loss(&val_set, &params, cfg.lambda, metric);
        if !val.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let prev = history.last().expect("initial entry").val_loss;
        let entry = EpochLog {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss: val,
            lr: cfg.lr,
            lambda: cfg.lambda,
        };
        log::info!("epoch {epoch}: train {:.6} val {:.6}", entry.train_loss, entry.val_loss);
        history.push(entry);
        if val < history[best.0].val_loss {
            best = (epoch, params.clone());
        }
        let mut reduction = prev - val;
        if cfg.stop_relative && prev != 0.0 {
            reduction /= prev.abs();
        }
        if !(reduction >= cfg.stop_delta) {
            break;
        }
    }
    Ok(TrainOutput { params: best.1, history, best_epoch: best.0 })
}

/// Search-side IVF centroids: group the sample by the insert-side
/// assignment, then average the learned reductions of each group. Empty
/// groups keep their insert-side centroid.
pub fn recompute_ivf_centroids(
    sample: &Matrix,
    insert: &ParamSet,
    learned: &LearnableParams,
    metric: Metric,
) -> Result<IvfCentroids> {
    if sample.rows() == 0 {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    check_dim(insert.input_dim(), sample.cols())?;
    let (n_c, d_r) = (insert.n_partitions(), insert.reduced_dim());
    let reduced = insert.transform.apply_batch(sample)?;
    let assignment: Vec<usize> =
        (0..sample.rows()).into_par_iter().map(|i| assign_unchecked(insert.ivf.centroids(), reduced.row(i), metric)).collect();
    let mut sums = vec![0f64; n_c * d_r];
    let mut counts = vec![0usize; n_c];
    for (i, &p) in assignment.iter().enumerate() {
        let x: Vec<f64> = sample.row(i).iter().map(|&v| v as f64).collect();
        let y = learned.apply(&x);
        for (s, v) in sums[p * d_r..(p + 1) * d_r].iter_mut().zip(y) {
            *s += v;
        }
        counts[p] += 1;
    }
    let mut out = insert.ivf.centroids().clone();
    for p in 0..n_c {
        if counts[p] == 0 {
            continue;
        }
        let row = out.row_mut(p);
        for t in 0..d_r {
            row[t] = (sums[p * d_r + t] / counts[p] as f64) as f32;
        }
    }
    IvfCentroids::new(out)
}

/// Complete search-side parameter set from a training run.
pub fn search_params(sample: &Matrix, insert: &ParamSet, learned: &LearnableParams, metric: Metric) -> Result<ParamSet> {
    let ivf = recompute_ivf_centroids(sample, insert, learned, metric)?;
    learned.to_param_set(ivf)
}
