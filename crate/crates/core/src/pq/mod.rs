//! 4-bit product quantization: codebooks, codes, lookup tables and ADC.

mod fastscan;
mod opq;

use std::io::{Read, Write};

use crate::bin;
use crate::clustering::{kmeans_refine, kmeans_train, nearest_l2, KMeansConfig};
use crate::error::{check_dim, Error, Result};
use crate::vector::{ensure_finite, Matrix, Metric};

pub use fastscan::{scan_block, scan_block_scalar, BlockView, CodeBlock, PackedCodes, BLOCK_SIZE};
pub use opq::{opq_init, OpqOutput};

/// Centroids per subspace. Codes are 4-bit nibbles.
pub const KSUB: usize = 16;

const CODEBOOK_MAGIC: &[u8; 5] = b"HKPQ1";

/// Per-subspace centroids. Subspace `j` covers input columns
/// `[j * dsub, (j + 1) * dsub)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    m: usize,
    dsub: usize,
    /// `m x KSUB x dsub`, row-major.
    centroids: Vec<f32>,
}

impl PqCodebook {
    pub fn new(m: usize, dsub: usize, centroids: Vec<f32>) -> Result<Self> {
        if m == 0 || dsub == 0 {
            return Err(Error::InvalidArgument("codebook needs m >= 1 and dsub >= 1".into()));
        }
        check_dim(m * KSUB * dsub, centroids.len())?;
        ensure_finite(&centroids)?;
        Ok(Self { m, dsub, centroids })
    }

    /// Number of subspaces.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dsub(&self) -> usize {
        self.dsub
    }

    /// Total dimension covered, `m * dsub`.
    pub fn dim(&self) -> usize {
        self.m * self.dsub
    }

    #[inline]
    pub fn centroid(&self, sub: usize, i: usize) -> &[f32] {
        let off = (sub * KSUB + i) * self.dsub;
        &self.centroids[off..off + self.dsub]
    }

    pub fn centroid_mut(&mut self, sub: usize, i: usize) -> &mut [f32] {
        let off = (sub * KSUB + i) * self.dsub;
        &mut self.centroids[off..off + self.dsub]
    }

    /// Centroids of one subspace as a `KSUB x dsub` matrix.
    pub fn subspace(&self, sub: usize) -> Matrix {
        let off = sub * KSUB * self.dsub;
        Matrix::from_vec(KSUB, self.dsub, self.centroids[off..off + KSUB * self.dsub].to_vec())
            .expect("consistent layout")
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.centroids
    }

    pub fn encode(&self, v: &[f32]) -> Result<PqCode> {
        check_dim(self.dim(), v.len())?;
        Ok(self.encode_unchecked(v))
    }

    pub(crate) fn encode_unchecked(&self, v: &[f32]) -> PqCode {
        let mut code = PqCode::zeros(self.m);
        for j in 0..self.m {
            let sub = &v[j * self.dsub..(j + 1) * self.dsub];
            let mut best = (0usize, f32::INFINITY);
            for i in 0..KSUB {
                let d = crate::vector::l2_sqr(sub, self.centroid(j, i));
                if d < best.1 {
                    best = (i, d);
                }
            }
            code.set(j, best.0 as u8);
        }
        code
    }

    /// Reconstruction `q(v)` of a code.
    pub fn decode(&self, code: &PqCode) -> Result<Vec<f32>> {
        check_dim(self.m, code.m())?;
        let mut out = Vec::with_capacity(self.dim());
        for j in 0..self.m {
            out.extend_from_slice(self.centroid(j, code.get(j) as usize));
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        bin::write_u32(w, self.m as u32)?;
        bin::write_u32(w, self.dsub as u32)?;
        bin::write_u32(w, KSUB as u32)?;
        bin::write_f32s(w, &self.centroids)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        bin::expect_magic(r, CODEBOOK_MAGIC)?;
        let m = bin::read_u32(r)? as usize;
        let dsub = bin::read_u32(r)? as usize;
        let ksub = bin::read_u32(r)? as usize;
        if ksub != KSUB {
            return Err(Error::Format(format!("unsupported ksub {ksub}, expected {KSUB}")));
        }
        let n = bin::to_len((m * ksub * dsub) as u64, "codebook size")?;
        let centroids = bin::read_f32s(r, n)?;
        Self::new(m, dsub, centroids)
    }
}

/// Train one 16-centroid k-means per subspace.
///
/// With fewer than 16 rows each subspace trains one centroid per row and
/// the remaining slots repeat them; encoding picks the lowest index on ties
/// so the copies are never used.
pub fn pq_train(data: &Matrix, m: usize, seed: u64) -> Result<PqCodebook> {
    let dsub = subspace_width(data.cols(), m)?;
    if data.rows() == 0 {
        return Err(Error::InvalidArgument("need at least one training vector".into()));
    }
    let k = data.rows().min(KSUB);
    let mut centroids = Vec::with_capacity(m * KSUB * dsub);
    for j in 0..m {
        let block = data.column_block(j * dsub, dsub);
        let cfg = KMeansConfig::new(k, seed.wrapping_add(j as u64));
        let c = kmeans_train(&block, &cfg)?;
        for i in 0..KSUB {
            centroids.extend_from_slice(c.row(i % k));
        }
    }
    PqCodebook::new(m, dsub, centroids)
}

/// Continue Lloyd iterations from an existing codebook.
pub(crate) fn pq_refine(data: &Matrix, init: &PqCodebook, max_iters: usize) -> Result<PqCodebook> {
    check_dim(init.dim(), data.cols())?;
    let mut centroids = Vec::with_capacity(init.centroids.len());
    for j in 0..init.m {
        let block = data.column_block(j * init.dsub, init.dsub);
        let out = kmeans_refine(&block, init.subspace(j), max_iters, 1e-7)?;
        centroids.extend_from_slice(out.centroids.as_slice());
    }
    PqCodebook::new(init.m, init.dsub, centroids)
}

pub(crate) fn subspace_width(dim: usize, m: usize) -> Result<usize> {
    if m == 0 || dim % m != 0 {
        return Err(Error::InvalidArgument(format!(
            "dimension {dim} is not divisible into {m} subspaces"
        )));
    }
    Ok(dim / m)
}

/// Mean squared reconstruction error of `data` under `cb`.
pub fn reconstruction_error(cb: &PqCodebook, data: &Matrix) -> f64 {
    if data.rows() == 0 {
        return 0.0;
    }
    let subs: Vec<Matrix> = (0..cb.m).map(|j| cb.subspace(j)).collect();
    let mut total = 0f64;
    for row in data.iter_rows() {
        for (j, sub_cb) in subs.iter().enumerate() {
            let sub = &row[j * cb.dsub..(j + 1) * cb.dsub];
            total += nearest_l2(sub_cb, sub).1 as f64;
        }
    }
    total / data.rows() as f64
}

/// `m` packed 4-bit centroid indices, two per byte (low nibble first).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PqCode {
    m: usize,
    bytes: Vec<u8>,
}

impl PqCode {
    pub fn zeros(m: usize) -> Self {
        Self { m, bytes: vec![0; m.div_ceil(2)] }
    }

    pub fn from_indices(indices: &[u8]) -> Result<Self> {
        let mut c = Self::zeros(indices.len());
        for (j, &i) in indices.iter().enumerate() {
            if i as usize >= KSUB {
                return Err(Error::InvalidArgument(format!("code index {i} out of range")));
            }
            c.set(j, i);
        }
        Ok(c)
    }

    pub fn from_bytes(m: usize, bytes: Vec<u8>) -> Result<Self> {
        check_dim(m.div_ceil(2), bytes.len())?;
        if m % 2 == 1 && bytes[m / 2] >> 4 != 0 {
            return Err(Error::Format("padding nibble must be zero".into()));
        }
        Ok(Self { m, bytes })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, j: usize) -> u8 {
        let b = self.bytes[j / 2];
        if j % 2 == 0 {
            b & 0x0f
        } else {
            b >> 4
        }
    }

    #[inline]
    pub fn set(&mut self, j: usize, v: u8) {
        debug_assert!((v as usize) < KSUB);
        let b = &mut self.bytes[j / 2];
        if j % 2 == 0 {
            *b = (*b & 0xf0) | v;
        } else {
            *b = (*b & 0x0f) | (v << 4);
        }
    }

    pub fn indices(&self) -> Vec<u8> {
        (0..self.m).map(|j| self.get(j)).collect()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// 8-bit copy of a lookup table. Cell `(j, i)` is approximated by
/// `bias[j] + scale * q[j][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLut {
    pub table: Vec<u8>,
    pub scale: f32,
    pub bias: Vec<f32>,
    bias_sum: f32,
}

impl QuantizedLut {
    #[inline]
    pub fn dequantize_sum(&self, acc: u32) -> f32 {
        self.bias_sum + self.scale * acc as f32
    }

    pub fn cell(&self, j: usize, i: usize) -> f32 {
        self.bias[j] + self.scale * self.table[j * KSUB + i] as f32
    }
}

/// Per-query table of subspace scores: `table[j * 16 + i]` is the
/// similarity between query slice `j` and centroid `i` of subspace `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut {
    m: usize,
    table: Vec<f32>,
    quantized: Option<QuantizedLut>,
}

impl Lut {
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn cell(&self, j: usize, i: usize) -> f32 {
        self.table[j * KSUB + i]
    }

    pub fn table(&self) -> &[f32] {
        &self.table
    }

    pub fn quantized(&self) -> Option<&QuantizedLut> {
        self.quantized.as_ref()
    }

    /// Add an 8-bit copy; scoring then uses the quantized cells.
    ///
    /// One scale is shared by all subspaces (the largest per-subspace range
    /// over 255) and each subspace keeps its own minimum as bias, so every
    /// cell is off by at most half a step.
    pub fn with_quantization(mut self) -> Self {
        let mut bias = Vec::with_capacity(self.m);
        let mut max_range = 0f32;
        for j in 0..self.m {
            let row = &self.table[j * KSUB..(j + 1) * KSUB];
            let lo = row.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            bias.push(lo);
            max_range = max_range.max(hi - lo);
        }
        let scale = max_range / 255.0;
        let table = self
            .table
            .iter()
            .enumerate()
            .map(|(c, &v)| {
                if scale == 0.0 {
                    0
                } else {
                    ((v - bias[c / KSUB]) / scale).round().clamp(0.0, 255.0) as u8
                }
            })
            .collect();
        let bias_sum = bias.iter().sum();
        self.quantized = Some(QuantizedLut { table, scale, bias, bias_sum });
        self
    }
}

/// Score every subspace centroid against the matching query slice.
pub fn compute_lut(cb: &PqCodebook, x_r: &[f32], metric: Metric) -> Result<Lut> {
    check_dim(cb.dim(), x_r.len())?;
    Ok(compute_lut_unchecked(cb, x_r, metric))
}

pub(crate) fn compute_lut_unchecked(cb: &PqCodebook, x_r: &[f32], metric: Metric) -> Lut {
    let mut table = Vec::with_capacity(cb.m * KSUB);
    for j in 0..cb.m {
        let sub = &x_r[j * cb.dsub..(j + 1) * cb.dsub];
        for i in 0..KSUB {
            table.push(metric.score(sub, cb.centroid(j, i)));
        }
    }
    Lut { m: cb.m, table, quantized: None }
}

/// Asymmetric distance: sum of per-subspace lookups, accumulated in
/// subspace order.
pub fn adc_score(lut: &Lut, code: &PqCode) -> Result<f32> {
    check_dim(lut.m, code.m())?;
    Ok(adc_score_unchecked(lut, code))
}

#[inline]
pub(crate) fn adc_score_unchecked(lut: &Lut, code: &PqCode) -> f32 {
    match &lut.quantized {
        Some(q) => {
            let mut acc = 0u32;
            for j in 0..lut.m {
                acc += q.table[j * KSUB + code.get(j) as usize] as u32;
            }
            q.dequantize_sum(acc)
        }
        None => {
            let mut s = 0f32;
            for j in 0..lut.m {
                s += lut.table[j * KSUB + code.get(j) as usize];
            }
            s
        }
    }
}
