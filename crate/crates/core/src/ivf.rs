//! IVF centroids, partition ranking and the partition store.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::{Read, Write};

use dashmap::mapref::entry::Entry;
use dashmap::DashMap;
use parking_lot::RwLock;

use crate::bin::{expect_magic, read_bytes, read_u32, read_u64, read_u64s, to_len, write_u32, write_u64, write_u64s};
use crate::error::{check_dim, Error, Result};
use crate::pq::{scan_block, Lut, PackedCodes, PqCode, BLOCK_SIZE};
use crate::vector::{dot, Matrix, Metric};

/// Per-dimension INT8 copy of a centroid matrix.
///
/// Entry `(i, j)` dequantizes to `offset[j] + scale[j] * values[i * d + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Q8Centroids {
    pub values: Vec<i8>,
    pub scale: Vec<f32>,
    pub offset: Vec<f32>,
    // squared norms of the dequantized rows, for L2 ranking
    sq_norms: Vec<f32>,
}

impl Q8Centroids {
    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn dequantize(&self) -> Matrix {
        let d = self.dim();
        let n = if d == 0 { 0 } else { self.values.len() / d };
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let row = out.row_mut(i);
            for j in 0..d {
                row[j] = self.offset[j] + self.scale[j] * self.values[i * d + j] as f32;
            }
        }
        out
    }

    /// Quantization step of dimension `j`.
    pub fn step(&self, j: usize) -> f32 {
        self.scale[j]
    }
}

/// Map every dimension affinely onto [-127, 127].
pub fn quantize_centroids(c: &Matrix) -> Result<Q8Centroids> {
    if !c.is_finite() {
        return Err(Error::NonFinite);
    }
    let (n, d) = (c.rows(), c.cols());
    let mut scale = vec![0f32; d];
    let mut offset = vec![0f32; d];
    for j in 0..d {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for row in c.iter_rows() {
            lo = lo.min(row[j]);
            hi = hi.max(row[j]);
        }
        if n == 0 {
            continue;
        }
        offset[j] = lo + (hi - lo) / 2.0;
        scale[j] = (hi - lo) / 254.0;
    }
    let mut values = Vec::with_capacity(n * d);
    for row in c.iter_rows() {
        for j in 0..d {
            let q = if scale[j] == 0.0 { 0.0 } else { ((row[j] - offset[j]) / scale[j]).round() };
            values.push(q.clamp(-127.0, 127.0) as i8);
        }
    }
    let mut q = Q8Centroids { values, scale, offset, sq_norms: Vec::new() };
    q.sq_norms = q
        .dequantize()
        .iter_rows()
        .map(|r| r.iter().map(|&v| v as f64 * v as f64).sum::<f64>() as f32)
        .collect();
    Ok(q)
}

/// Coarse quantizer: full-precision centroids plus their INT8 copy.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfCentroids {
    centroids: Matrix,
    q8: Q8Centroids,
}

impl IvfCentroids {
    pub fn new(centroids: Matrix) -> Result<Self> {
        if centroids.rows() == 0 || centroids.cols() == 0 {
            return Err(Error::InvalidArgument("need at least one non-empty centroid".into()));
        }
        let q8 = quantize_centroids(&centroids)?;
        Ok(Self { centroids, q8 })
    }

    pub fn len(&self) -> usize {
        self.centroids.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn q8(&self) -> &Q8Centroids {
        &self.q8
    }

    pub(crate) fn scores(&self, x_r: &[f32], metric: Metric, use_q8: bool) -> Vec<f32> {
        if !use_q8 {
            return self.centroids.iter_rows().map(|c| metric.score(x_r, c)).collect();
        }
        // <x, offset + scale * q> = <x * scale, q> + <x, offset>
        let q = &self.q8;
        let d = self.dim();
        let xs: Vec<f32> = x_r.iter().zip(&q.scale).map(|(x, s)| x * s).collect();
        let x_off = dot(x_r, &q.offset);
        let x_sq = match metric {
            Metric::EuclideanSquared => dot(x_r, x_r),
            Metric::InnerProduct => 0.0,
        };
        let mut row = vec![0f32; d];
        (0..self.len())
            .map(|i| {
                for (r, &v) in row.iter_mut().zip(&q.values[i * d..(i + 1) * d]) {
                    *r = v as f32;
                }
                let ip = dot(&xs, &row) + x_off;
                match metric {
                    Metric::InnerProduct => ip,
                    Metric::EuclideanSquared => -(x_sq - 2.0 * ip + q.sq_norms[i]),
                }
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_u32(w, self.len() as u32)?;
        write_u32(w, self.dim() as u32)?;
        crate::bin::write_f32s(w, self.centroids.as_slice())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        let data = crate::bin::read_f32s(r, to_len((n * d) as u64, "centroid count")?)?;
        Self::new(Matrix::from_vec(n, d, data)?)
    }
}

/// Partitions ordered by descending score, ties by partition id.
pub fn rank_partitions(x_r: &[f32], c: &IvfCentroids, metric: Metric, use_q8: bool) -> Result<Vec<(usize, f32)>> {
    check_dim(c.dim(), x_r.len())?;
    Ok(rank_top(x_r, c, metric, use_q8, c.len()))
}

/// The first `limit` entries of [`rank_partitions`].
pub(crate) fn rank_top(x_r: &[f32], c: &IvfCentroids, metric: Metric, use_q8: bool, limit: usize) -> Vec<(usize, f32)> {
    let mut ranked: Vec<(usize, f32)> = c.scores(x_r, metric, use_q8).into_iter().enumerate().collect();
    let cmp = |a: &(usize, f32), b: &(usize, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let limit = limit.min(ranked.len());
    if limit == 0 {
        return Vec::new();
    }
    if limit < ranked.len() {
        ranked.select_nth_unstable_by(limit - 1, cmp);
        ranked.truncate(limit);
    }
    ranked.sort_unstable_by(cmp);
    ranked
}

/// Bounded best-k collector. Higher scores win; equal scores prefer the
/// smaller id.
#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Worst>,
}

#[derive(Debug, Clone, Copy)]
struct Worst {
    score: f32,
    id: u64,
}

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    // the heap top is the entry that would be evicted first
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.id.cmp(&other.id))
    }
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k.min(1 << 16) + 1) }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Whether `offer(score, id)` would keep the entry.
    #[inline]
    pub fn accepts(&self, score: f32, id: u64) -> bool {
        if self.heap.len() < self.k {
            return true;
        }
        match self.heap.peek() {
            Some(w) => Worst { score, id } < *w,
            None => false,
        }
    }

    /// Returns true when the entry entered the collector.
    pub fn offer(&mut self, score: f32, id: u64) -> bool {
        if !self.accepts(score, id) {
            return false;
        }
        if self.heap.len() == self.k {
            self.heap.pop();
        }
        self.heap.push(Worst { score, id });
        true
    }

    /// `(id, score)` by descending score, ties by ascending id.
    pub fn into_sorted(self) -> Vec<(u64, f32)> {
        self.heap.into_sorted_vec().into_iter().map(|w| (w.id, w.score)).collect()
    }
}

#[derive(Debug, Default)]
struct PartitionData {
    ids: Vec<u64>,
    codes: PackedCodes,
}

/// One inverted list: ids and their codes in append order.
#[derive(Debug)]
pub struct Partition {
    data: RwLock<PartitionData>,
}

impl Partition {
    fn new(m: usize) -> Self {
        Self { data: RwLock::new(PartitionData { ids: Vec::new(), codes: PackedCodes::new(m) }) }
    }

    pub fn len(&self) -> usize {
        self.data.read().ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<u64> {
        self.data.read().ids.clone()
    }

    pub fn entries(&self) -> Vec<(u64, PqCode)> {
        let g = self.data.read();
        g.ids.iter().copied().zip(g.codes.iter()).collect()
    }
}

/// All partitions of an index plus the shared tombstone set.
///
/// Lock order is tombstones, then owner map, then partition data.
#[derive(Debug)]
pub struct PartitionSet {
    m: usize,
    partitions: Vec<Partition>,
    owner: DashMap<u64, u32>,
    tombstones: RwLock<HashSet<u64>>,
}

const PARTITION_MAGIC: &[u8] = b"HKPT1";

impl PartitionSet {
    pub fn new(n_partitions: usize, m: usize) -> Self {
        Self {
            m,
            partitions: (0..n_partitions).map(|_| Partition::new(m)).collect(),
            owner: DashMap::new(),
            tombstones: RwLock::new(HashSet::new()),
        }
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn partition(&self, pid: usize) -> Option<&Partition> {
        self.partitions.get(pid)
    }

    pub fn lens(&self) -> Vec<usize> {
        self.partitions.iter().map(Partition::len).collect()
    }

    /// Stored entries, including tombstoned ones.
    pub fn total_len(&self) -> usize {
        self.owner.len()
    }

    pub fn live_len(&self) -> usize {
        let t = self.tombstones.read();
        self.owner.iter().filter(|e| !t.contains(e.key())).count()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.owner.contains_key(&id)
    }

    pub fn partition_of(&self, id: u64) -> Option<usize> {
        self.owner.get(&id).map(|p| *p as usize)
    }

    pub fn append(&self, pid: usize, id: u64, code: &PqCode) -> Result<()> {
        let part = self.partitions.get(pid).ok_or_else(|| {
            Error::InvalidArgument(format!("partition {pid} out of range ({} partitions)", self.partitions.len()))
        })?;
        if code.m() != self.m {
            return Err(Error::DimensionMismatch { expected: self.m, actual: code.m() });
        }
        match self.owner.entry(id) {
            Entry::Occupied(_) => return Err(Error::DuplicateId(id)),
            Entry::Vacant(v) => {
                // hold the entry until the code is visible so a racing
                // duplicate cannot slip in between
                let mut g = part.data.write();
                g.ids.push(id);
                g.codes.push(code);
                v.insert(pid as u32);
            }
        }
        Ok(())
    }

    /// Tombstone every known id; returns how many were newly deleted.
    pub fn delete(&self, ids: &[u64]) -> usize {
        let mut t = self.tombstones.write();
        ids.iter().filter(|id| self.owner.contains_key(id) && t.insert(**id)).count()
    }

    pub fn is_deleted(&self, id: u64) -> bool {
        self.tombstones.read().contains(&id)
    }

    pub fn tombstones(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.tombstones.read().iter().copied().collect();
        v.sort_unstable();
        v
    }

    /// Score the partition's live codes into `collector`. Returns the
    /// number of entries that entered the collector.
    pub fn scan(&self, pid: usize, lut: &Lut, collector: &mut TopK) -> Result<usize> {
        let part = self.partitions.get(pid).ok_or_else(|| {
            Error::InvalidArgument(format!("partition {pid} out of range ({} partitions)", self.partitions.len()))
        })?;
        if lut.m() != self.m {
            return Err(Error::DimensionMismatch { expected: self.m, actual: lut.m() });
        }
        let tomb = self.tombstones.read();
        let g = part.data.read();
        let len = g.ids.len();
        let mut added = 0;
        for b in 0..g.codes.num_blocks() {
            let view = g.codes.block_prefix(b, len);
            let scores = scan_block(view, lut);
            let ids = &g.ids[b * BLOCK_SIZE..b * BLOCK_SIZE + view.len()];
            for (&id, &s) in ids.iter().zip(&scores) {
                if collector.accepts(s, id) && !tomb.contains(&id) {
                    collector.offer(s, id);
                    added += 1;
                }
            }
        }
        Ok(added)
    }

    /// Drop tombstoned entries from every partition and clear the set.
    /// Returns the removed ids, sorted.
    pub fn compact(&self) -> Vec<u64> {
        let mut t = self.tombstones.write();
        for part in &self.partitions {
            let mut g = part.data.write();
            if g.ids.iter().any(|id| t.contains(id)) {
                *g = live_copy(&g, &t, self.m);
            }
        }
        let mut removed: Vec<u64> = t.drain().collect();
        for id in &removed {
            self.owner.remove(id);
        }
        removed.sort_unstable();
        removed
    }

    /// Write a compacted image: tombstoned entries are left out and the
    /// stored tombstone list is empty.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PARTITION_MAGIC)?;
        write_u32(w, self.partitions.len() as u32)?;
        write_u32(w, self.m as u32)?;
        let t = self.tombstones.read();
        for (pid, part) in self.partitions.iter().enumerate() {
            let g = part.data.read();
            let live = live_copy(&g, &t, self.m);
            write_u32(w, pid as u32)?;
            write_u64(w, live.ids.len() as u64)?;
            write_u64s(w, &live.ids)?;
            w.write_all(live.codes.as_bytes())?;
        }
        write_u64(w, 0)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, PARTITION_MAGIC)?;
        let n = read_u32(r)? as usize;
        let m = read_u32(r)? as usize;
        if m == 0 {
            return Err(Error::Format("partition file has zero subspaces".into()));
        }
        let set = Self::new(n, m);
        for expected in 0..n {
            let pid = read_u32(r)? as usize;
            if pid != expected {
                return Err(Error::Format(format!("expected partition {expected}, found {pid}")));
            }
            let len = to_len(read_u64(r)?, "partition length")?;
            let ids = read_u64s(r, len)?;
            let bytes = read_bytes(r, len.div_ceil(BLOCK_SIZE) * m * (BLOCK_SIZE / 2))?;
            let codes = PackedCodes::from_raw(m, len, bytes)
                .ok_or_else(|| Error::Format(format!("partition {pid} code buffer has the wrong size")))?;
            for &id in &ids {
                if set.owner.insert(id, pid as u32).is_some() {
                    return Err(Error::Format(format!("id {id} stored twice")));
                }
            }
            *set.partitions[pid].data.write() = PartitionData { ids, codes };
        }
        let n_tomb = to_len(read_u64(r)?, "tombstone count")?;
        let tomb = read_u64s(r, n_tomb)?;
        set.delete(&tomb);
        Ok(set)
    }
}

fn live_copy(g: &PartitionData, tomb: &HashSet<u64>, m: usize) -> PartitionData {
    let mut out = PartitionData { ids: Vec::new(), codes: PackedCodes::new(m) };
    for (i, &id) in g.ids.iter().enumerate() {
        if !tomb.contains(&id) {
            out.ids.push(id);
            out.codes.push(&g.codes.get(i));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pq::{adc_score, compute_lut, tests::random_codebook};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn random_code(rng: &mut ChaCha8Rng, m: usize) -> PqCode {
        let idx: Vec<u8> = (0..m).map(|_| rng.random_range(0..16)).collect();
        PqCode::from_indices(&idx).unwrap()
    }

    #[test]
    fn query_at_centroid_ranks_it_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rows = Vec::new();
        for _ in 0..16 {
            let v: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            rows.push(crate::vector::normalize(&v).unwrap());
        }
        let c = IvfCentroids::new(Matrix::from_rows(&rows).unwrap()).unwrap();
        for use_q8 in [false, true] {
            let r = rank_partitions(&rows[7], &c, Metric::InnerProduct, use_q8).unwrap();
            assert_eq!(r[0].0, 7);
            assert_eq!(r.len(), 16);
        }
    }

    #[test]
    fn single_centroid() {
        let c = IvfCentroids::new(Matrix::from_rows(&[[1.0f32, 2.0]]).unwrap()).unwrap();
        let r = rank_partitions(&[0.0, 0.0], &c, Metric::EuclideanSquared, true).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].0, 0);
        assert!(rank_partitions(&[0.0], &c, Metric::EuclideanSquared, true).is_err());
    }

    #[test]
    fn ranking_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = IvfCentroids::new(random_matrix(&mut rng, 64, 12)).unwrap();
        for _ in 0..50 {
            let x: Vec<f32> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            for metric in [Metric::InnerProduct, Metric::EuclideanSquared] {
                let mut oracle: Vec<(usize, f32)> =
                    c.centroids().iter_rows().map(|r| metric.score(&x, r)).enumerate().collect();
                oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                assert_eq!(rank_partitions(&x, &c, metric, false).unwrap(), oracle);
                let top = rank_top(&x, &c, metric, false, 5);
                assert_eq!(top, oracle[..5].to_vec());
            }
        }
    }

    #[test]
    fn q8_ranking_scores_track_dequantized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = IvfCentroids::new(random_matrix(&mut rng, 32, 16)).unwrap();
        let deq = c.q8().dequantize();
        for _ in 0..20 {
            let x: Vec<f32> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            for metric in [Metric::InnerProduct, Metric::EuclideanSquared] {
                let got = c.scores(&x, metric, true);
                for (i, row) in deq.iter_rows().enumerate() {
                    let want = metric.score(&x, row);
                    assert!((got[i] - want).abs() <= 1e-3 * (1.0 + want.abs()), "{} vs {want}", got[i]);
                }
            }
        }
    }

    #[test]
    fn quantize_zero_and_endpoint() {
        let q = quantize_centroids(&Matrix::zeros(3, 4)).unwrap();
        assert!(q.values.iter().all(|&v| v == 0));
        assert!(q.scale.iter().all(|&s| s == 0.0));
        assert_eq!(q.dequantize(), Matrix::zeros(3, 4));

        let c = Matrix::from_rows(&[[-1.0f32, 5.0], [0.25, 5.0], [1.0, 5.0]]).unwrap();
        let q = quantize_centroids(&c).unwrap();
        assert_eq!(q.values[4], 127);
        assert_eq!(q.values[0], -127);
        // constant dimension is exact
        assert_eq!(q.scale[1], 0.0);
        assert!(q.dequantize().iter_rows().all(|r| r[1] == 5.0));
        assert!(quantize_centroids(&Matrix::from_rows(&[[f32::NAN]]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn quantize_round_trip_bound(seed in any::<u64>(), n in 1usize..40, d in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_matrix(&mut rng, n, d);
            let q = quantize_centroids(&c).unwrap();
            let deq = q.dequantize();
            for j in 0..d {
                let lo = c.iter_rows().map(|r| r[j]).fold(f32::INFINITY, f32::min);
                let hi = c.iter_rows().map(|r| r[j]).fold(f32::NEG_INFINITY, f32::max);
                let step = (hi - lo) / 254.0;
                for i in 0..n {
                    let err = (deq.row(i)[j] - c.row(i)[j]).abs();
                    // allow float rounding on top of the half-step bound
                    prop_assert!(err <= step / 2.0 + 1e-6 * (1.0 + hi.abs().max(lo.abs())), "err {err} step {step}");
                }
            }
        }

        #[test]
        fn q8_top_set_equals_full_ranking_at_full_probe(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = IvfCentroids::new(random_matrix(&mut rng, 20, 6)).unwrap();
            let x: Vec<f32> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut a: Vec<usize> = rank_partitions(&x, &c, Metric::InnerProduct, true).unwrap().into_iter().map(|p| p.0).collect();
            let mut b: Vec<usize> = rank_partitions(&x, &c, Metric::InnerProduct, false).unwrap().into_iter().map(|p| p.0).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn collector_matches_sort_oracle(entries in prop::collection::vec((-4i32..4, 0u64..50), 0..80), k in 0usize..20) {
            let mut top = TopK::new(k);
            let mut seen = HashSet::new();
            let mut all = Vec::new();
            for (s, id) in entries {
                if seen.insert(id) {
                    top.offer(s as f32, id);
                    all.push((id, s as f32));
                }
            }
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(k);
            prop_assert_eq!(top.into_sorted(), all);
        }
    }

    #[test]
    fn append_visibility_and_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = random_codebook(&mut rng, 4, 2);
        let ps = PartitionSet::new(2, 4);
        let code = random_code(&mut rng, 4);
        ps.append(0, 42, &code).unwrap();
        assert_eq!(ps.lens(), vec![1, 0]);
        let lut = compute_lut(&cb, &[0.1; 8], Metric::InnerProduct).unwrap();
        let mut top = TopK::new(10);
        assert_eq!(ps.scan(0, &lut, &mut top).unwrap(), 1);
        assert_eq!(top.into_sorted()[0].0, 42);
        let mut top = TopK::new(10);
        assert_eq!(ps.scan(1, &lut, &mut top).unwrap(), 0);

        assert!(matches!(ps.append(1, 42, &code), Err(Error::DuplicateId(42))));
        assert!(ps.append(2, 7, &code).is_err());
        assert!(ps.append(0, 7, &PqCode::zeros(3)).is_err());
        assert_eq!(ps.total_len(), 1);
    }

    #[test]
    fn round_robin_appends_conserve_counts() {
        let ps = PartitionSet::new(7, 2);
        for id in 0..10_000u64 {
            ps.append((id % 7) as usize, id, &PqCode::zeros(2)).unwrap();
        }
        let lens = ps.lens();
        assert_eq!(lens.iter().sum::<usize>(), 10_000);
        for (p, &l) in lens.iter().enumerate() {
            assert_eq!(l, (0..10_000).filter(|i| i % 7 == p).count());
        }
        assert_eq!(ps.partition(3).unwrap().ids(), (0..10_000u64).filter(|i| i % 7 == 3).collect::<Vec<_>>());
    }

    fn scalar_scan(entries: &[(u64, PqCode)], lut: &Lut, dead: &HashSet<u64>, top: &mut TopK) -> usize {
        let mut added = 0;
        for (id, code) in entries {
            if dead.contains(id) {
                continue;
            }
            if top.offer(adc_score(lut, code).unwrap(), *id) {
                added += 1;
            }
        }
        added
    }

    #[test]
    fn scan_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (m, quantized) in [(4, false), (8, true), (3, false), (16, true)] {
            let cb = random_codebook(&mut rng, m, 2);
            let ps = PartitionSet::new(3, m);
            for id in 0..500u64 {
                ps.append(rng.random_range(0..3), id * 3 + 1, &random_code(&mut rng, m)).unwrap();
            }
            let dead: Vec<u64> = (0..500u64).filter(|_| rng.random_bool(0.2)).map(|i| i * 3 + 1).collect();
            ps.delete(&dead);
            let dead: HashSet<u64> = dead.into_iter().collect();
            let x: Vec<f32> = (0..2 * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut lut = compute_lut(&cb, &x, Metric::EuclideanSquared).unwrap();
            if quantized {
                lut = lut.with_quantization();
            }
            for k in [1, 10, 60, 1000] {
                let mut a = TopK::new(k);
                let mut b = TopK::new(k);
                for pid in 0..3 {
                    let na = ps.scan(pid, &lut, &mut a).unwrap();
                    let nb = scalar_scan(&ps.partition(pid).unwrap().entries(), &lut, &dead, &mut b);
                    assert_eq!(na, nb);
                }
                let a = a.into_sorted();
                assert!(a.iter().all(|(id, _)| !dead.contains(id)));
                assert_eq!(a, b.into_sorted());
            }
        }
    }

    #[test]
    fn empty_partition_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cb = random_codebook(&mut rng, 2, 2);
        let ps = PartitionSet::new(1, 2);
        let lut = compute_lut(&cb, &[0.0; 4], Metric::InnerProduct).unwrap();
        let mut top = TopK::new(5);
        assert_eq!(ps.scan(0, &lut, &mut top).unwrap(), 0);
        assert!(ps.scan(1, &lut, &mut top).is_err());
    }

    #[test]
    fn delete_semantics() {
        let ps = PartitionSet::new(1, 1);
        for id in 0..5 {
            ps.append(0, id, &PqCode::zeros(1)).unwrap();
        }
        assert_eq!(ps.delete(&[1, 3, 99]), 2);
        assert_eq!(ps.delete(&[1]), 0);
        assert_eq!(ps.tombstones(), vec![1, 3]);
        assert_eq!(ps.live_len(), 3);
        assert_eq!(ps.compact(), vec![1, 3]);
        assert_eq!(ps.partition(0).unwrap().ids(), vec![0, 2, 4]);
        assert!(ps.tombstones().is_empty());
        // compaction frees the id
        ps.append(0, 3, &PqCode::zeros(1)).unwrap();
    }

    #[test]
    fn checkpoint_round_trip_is_compacted() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ps = PartitionSet::new(4, 5);
        for id in 0..300u64 {
            ps.append(rng.random_range(0..4), id, &random_code(&mut rng, 5)).unwrap();
        }
        ps.delete(&[3, 50, 299]);
        let mut buf = Vec::new();
        ps.write_to(&mut buf).unwrap();
        let back = PartitionSet::read_from(&mut buf.as_slice()).unwrap();
        assert!(back.tombstones().is_empty());
        assert_eq!(back.total_len(), 297);
        for pid in 0..4 {
            let want: Vec<(u64, PqCode)> = ps
                .partition(pid)
                .unwrap()
                .entries()
                .into_iter()
                .filter(|(id, _)| ![3, 50, 299].contains(id))
                .collect();
            assert_eq!(back.partition(pid).unwrap().entries(), want);
        }
        // truncated input is rejected
        assert!(PartitionSet::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn concurrent_appends_and_scans() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cb = random_codebook(&mut rng, 4, 2);
        let ps = PartitionSet::new(4, 4);
        let lut = compute_lut(&cb, &[0.3; 8], Metric::InnerProduct).unwrap();
        std::thread::scope(|s| {
            for t in 0..4u64 {
                let ps = &ps;
                s.spawn(move || {
                    for i in 0..2000u64 {
                        let id = t * 10_000 + i;
                        ps.append((id % 4) as usize, id, &PqCode::zeros(4)).unwrap();
                    }
                });
            }
            s.spawn(|| {
                for _ in 0..200 {
                    let mut top = TopK::new(usize::MAX);
                    for pid in 0..4 {
                        ps.scan(pid, &lut, &mut top).unwrap();
                    }
                }
            });
        });
        assert_eq!(ps.total_len(), 8000);
        let mut top = TopK::new(usize::MAX);
        for pid in 0..4 {
            ps.scan(pid, &lut, &mut top).unwrap();
        }
        assert_eq!(top.len(), 8000);
    }
}
