//! Vector math primitives shared by every stage of the index.
//!
//! All scores follow one orientation: higher means closer. Squared
//! Euclidean distances are negated at the metric boundary so a single
//! comparator works for ranking, collectors and softmax alike.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const LANES: usize = 8;

/// Similarity metric. Scores are always "higher = closer".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    InnerProduct,
    /// Negated squared L2 distance.
    EuclideanSquared,
}

impl Metric {
    /// Score two equal-length slices. Callers guarantee the lengths match.
    #[inline]
    pub fn score(self, x: &[f32], v: &[f32]) -> f32 {
        match self {
            Metric::InnerProduct => dot(x, v),
            Metric::EuclideanSquared => -l2_sqr(x, v),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Metric::InnerProduct => 0,
            Metric::EuclideanSquared => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Metric::InnerProduct),
            1 => Some(Metric::EuclideanSquared),
            _ => None,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ip" | "inner_product" | "innerproduct" => Ok(Metric::InnerProduct),
            "l2" | "euclidean" | "euclidean_squared" => Ok(Metric::EuclideanSquared),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

/// Dot product with a fixed 8-lane accumulation order.
///
/// The lane layout is part of the contract: every caller that needs
/// bit-identical scores (batched vs. single, refine vs. brute force) goes
/// through this function.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    reduce_lanes(acc) + tail
}

/// Squared Euclidean distance, same lane order as [`dot`].
#[inline]
pub fn l2_sqr(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            let d = xa[l] - xb[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    reduce_lanes(acc) + tail
}

#[inline]
fn reduce_lanes(acc: [f32; LANES]) -> f32 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Checked similarity between two vectors.
pub fn similarity(x: &[f32], v: &[f32], metric: Metric) -> Result<f32> {
    check_dim(x.len(), v.len())?;
    Ok(metric.score(x, v))
}

pub fn ensure_finite(values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Scale `v` to unit L2 norm.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

pub fn normalize_in_place(v: &mut [f32]) -> Result<()> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    for x in v.iter_mut() {
        *x = ((*x as f64) / norm) as f32;
    }
    Ok(())
}

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::InvalidArgument(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact(0) panics, so handle the degenerate width explicitly
        let cols = self.cols.max(1);
        let n = if self.cols == 0 { 0 } else { self.rows };
        self.data.chunks_exact(cols).take(n)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        check_dim(self.cols, row.len())?;
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Copy of the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Column slice `[start, start + width)` of every row.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[start..start + width]);
        }
        Matrix { rows: self.rows, cols: width, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Affine dimensionality reduction `R(v) = A v + b`, `d -> d_r`.
///
/// `A` is stored transposed: row `j` of `weights` holds the `d`
/// coefficients that produce output coordinate `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    weights: Matrix,
    bias: Vec<f32>,
}

impl Transform {
    /// `weights` is `d_r x d`, `bias` has `d_r` entries.
    pub fn new(weights: Matrix, bias: Vec<f32>) -> Result<Self> {
        check_dim(weights.rows(), bias.len())?;
        if weights.rows() > weights.cols() {
            return Err(Error::InvalidArgument(format!(
                "reduced dimension {} exceeds input dimension {}",
                weights.rows(),
                weights.cols()
            )));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite);
        }
        ensure_finite(&bias)?;
        Ok(Self { weights, bias })
    }

    pub fn identity(d: usize) -> Self {
        let mut w = Matrix::zeros(d, d);
        for i in 0..d {
            w.row_mut(i)[i] = 1.0;
        }
        Self { weights: w, bias: vec![0.0; d] }
    }

    /// Input dimension `d`.
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Output dimension `d_r`.
    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Apply to one vector, writing `d_r` values into `out`.
    #[inline]
    pub fn apply_into(&self, x: &[f32], out: &mut [f32]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(self.weights.row(j), x) + self.bias[j];
        }
    }

    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        check_dim(self.input_dim(), x.len())?;
        let mut out = vec![0.0; self.output_dim()];
        self.apply_into(x, &mut out);
        Ok(out)
    }

    /// Apply to every row of `xs`. Each output row is bit-identical to
    /// [`Transform::apply`] on the same input row.
    pub fn apply_batch(&self, xs: &Matrix) -> Result<Matrix> {
        if xs.rows() > 0 {
            check_dim(self.input_dim(), xs.cols())?;
        }
        let d_r = self.output_dim();
        let mut out = Matrix::zeros(xs.rows(), d_r);
        if d_r == 0 {
            return Ok(out);
        }
        // Tile over output coordinates so a block of weight rows stays hot
        // while it is reused across the batch.
        const TILE: usize = 16;
        for j0 in (0..d_r).step_by(TILE) {
            let j1 = (j0 + TILE).min(d_r);
            for (i, x) in xs.iter_rows().enumerate() {
                let o = out.row_mut(i);
                for j in j0..j1 {
                    o[j] = dot(self.weights.row(j), x) + self.bias[j];
                }
            }
        }
        Ok(out)
    }
}

/// An id-addressed collection of equal-length vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    vectors: Matrix,
    ids: Vec<u64>,
}

impl Dataset {
    pub fn new(vectors: Matrix, ids: Vec<u64>) -> Result<Self> {
        check_dim(vectors.rows(), ids.len())?;
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Self { vectors, ids })
    }

    /// Dataset with ids `0..N`.
    pub fn with_sequential_ids(vectors: Matrix) -> Result<Self> {
        let ids = (0..vectors.rows() as u64).collect();
        Self::new(vectors, ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn get(&self, i: usize) -> (u64, &[f32]) {
        (self.ids[i], self.vectors.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> + '_ {
        self.ids.iter().copied().zip(self.vectors.iter_rows())
    }

    /// Normalize every row to unit length.
    pub fn normalized(mut self) -> Result<Self> {
        for i in 0..self.vectors.rows() {
            normalize_in_place(self.vectors.row_mut(i))?;
        }
        Ok(self)
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            vectors: self.vectors.select_rows(rows),
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn into_parts(self) -> (Matrix, Vec<u64>) {
        (self.vectors, self.ids)
    }
}
