//! The two-stage index: a compressed filter index with separate insert and
//! search parameters, plus the full-precision vectors used for refinement.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use dashmap::DashMap;
use parking_lot::RwLock;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bin::{expect_magic, read_f32s, read_u32, read_u64, to_len, write_f32s, write_u32, write_u64};
use crate::clustering::{assign_unchecked, kmeans_train, sample, KMeansConfig};
use crate::error::{check_dim, Error, Result};
use crate::ivf::{rank_top, IvfCentroids, PartitionSet, TopK};
use crate::pq::{compute_lut_unchecked, opq_init, PqCode, PqCodebook};
use crate::vector::{ensure_finite, Dataset, Matrix, Metric, Transform};

const PARAMS_MAGIC: &[u8] = b"HKPS1";
const FULL_MAGIC: &[u8] = b"HKFV1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One complete set of compression parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub transform: Transform,
    pub ivf: IvfCentroids,
    pub pq: PqCodebook,
}

impl ParamSet {
    pub fn new(transform: Transform, ivf: IvfCentroids, pq: PqCodebook) -> Result<Self> {
        let d_r = transform.output_dim();
        if ivf.dim() != d_r {
            return Err(Error::Incompatible(format!("IVF centroids have {} dims, transform outputs {d_r}", ivf.dim())));
        }
        if pq.dim() != d_r {
            return Err(Error::Incompatible(format!("PQ codebook covers {} dims, transform outputs {d_r}", pq.dim())));
        }
        Ok(Self { transform, ivf, pq })
    }

    pub fn input_dim(&self) -> usize {
        self.transform.input_dim()
    }

    pub fn reduced_dim(&self) -> usize {
        self.transform.output_dim()
    }

    pub fn m(&self) -> usize {
        self.pq.m()
    }

    pub fn n_partitions(&self) -> usize {
        self.ivf.len()
    }

    /// Search parameters must match the insert side in every shape that the
    /// stored codes and partitions depend on.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        let a = (self.input_dim(), self.reduced_dim(), self.m(), self.pq.dsub(), self.n_partitions());
        let b = (other.input_dim(), other.reduced_dim(), other.m(), other.pq.dsub(), other.n_partitions());
        if a != b {
            return Err(Error::Incompatible(format!(
                "(d, d_r, M, dsub, N_c) = {b:?} does not match index {a:?}"
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        write_u32(w, self.input_dim() as u32)?;
        write_u32(w, self.reduced_dim() as u32)?;
        write_f32s(w, self.transform.weights().as_slice())?;
        write_f32s(w, self.transform.bias())?;
        self.ivf.write_to(w)?;
        self.pq.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, PARAMS_MAGIC)?;
        let d = read_u32(r)? as usize;
        let d_r = read_u32(r)? as usize;
        let weights = read_f32s(r, to_len((d * d_r) as u64, "transform size")?)?;
        let bias = read_f32s(r, d_r)?;
        let transform = Transform::new(Matrix::from_vec(d_r, d, weights)?, bias)?;
        let ivf = IvfCentroids::read_from(r)?;
        let pq = PqCodebook::read_from(r)?;
        Self::new(transform, ivf, pq)
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

/// Early-termination counter: counts consecutive partitions that each
/// contributed fewer than `t` candidates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyTermination {
    t: f32,
    n_t: usize,
    counter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtDecision {
    Continue,
    Stop,
}

impl EarlyTermination {
    pub fn new(t: f32, n_t: usize) -> Self {
        Self { t, n_t, counter: 0 }
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn update(&mut self, n_added: usize) -> EtDecision {
        if (n_added as f32) < self.t {
            self.counter += 1;
        } else {
            self.counter = 0;
        }
        if self.counter > self.n_t {
            EtDecision::Stop
        } else {
            EtDecision::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub k: usize,
    /// Candidate count is `k * k_factor`.
    pub k_factor: usize,
    pub nprobe: usize,
    pub et_enabled: bool,
    /// Threshold on candidates added per partition; `None` means `k' / 200`.
    pub et_t: Option<f32>,
    pub et_nt: usize,
    pub use_q8: bool,
    pub quantize_lut: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { k: 10, k_factor: 10, nprobe: 1, et_enabled: false, et_t: None, et_nt: 10, use_q8: true, quantize_lut: false }
    }
}

impl SearchConfig {
    pub fn new(k: usize, k_factor: usize, nprobe: usize) -> Self {
        Self { k, k_factor, nprobe, ..Self::default() }
    }

    pub fn with_early_termination(mut self, t: Option<f32>, n_t: usize) -> Self {
        self.et_enabled = true;
        self.et_t = t;
        self.et_nt = n_t;
        self
    }

    pub fn k_prime(&self) -> usize {
        self.k.saturating_mul(self.k_factor)
    }

    pub fn et_threshold(&self) -> f32 {
        self.et_t.unwrap_or(self.k_prime() as f32 / 200.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k_factor == 0 || self.nprobe == 0 {
            return Err(Error::InvalidArgument(format!(
                "k, k_factor and nprobe must be positive (got {}, {}, {})",
                self.k, self.k_factor, self.nprobe
            )));
        }
        Ok(())
    }
}

/// Output of the filter stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterResult {
    /// `(id, approximate score)`, best first.
    pub candidates: Vec<(u64, f32)>,
    pub partitions_scanned: usize,
}

/// Id-addressed full-precision vectors.
#[derive(Debug)]
pub struct FullVectorStore {
    d: usize,
    vectors: DashMap<u64, Box<[f32]>>,
}

impl FullVectorStore {
    pub fn new(d: usize) -> Self {
        Self { d, vectors: DashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.vectors.contains_key(&id)
    }

    pub fn insert(&self, id: u64, v: &[f32]) -> Result<()> {
        check_dim(self.d, v.len())?;
        ensure_finite(v)?;
        match self.vectors.entry(id) {
            dashmap::mapref::entry::Entry::Occupied(_) => Err(Error::DuplicateId(id)),
            dashmap::mapref::entry::Entry::Vacant(e) => {
                e.insert(v.into());
                Ok(())
            }
        }
    }

    pub fn get(&self, id: u64) -> Option<Vec<f32>> {
        self.vectors.get(&id).map(|v| v.to_vec())
    }

    pub fn remove(&self, id: u64) -> bool {
        self.vectors.remove(&id).is_some()
    }

    pub fn score(&self, id: u64, x: &[f32], metric: Metric) -> Option<f32> {
        self.vectors.get(&id).map(|v| metric.score(x, &v))
    }

    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.vectors.iter().map(|e| *e.key()).collect();
        ids.sort_unstable();
        ids
    }

    /// Exact top-`k` among `candidates`, ties by ascending id.
    pub fn refine(&self, x: &[f32], candidates: &[u64], k: usize, metric: Metric) -> Result<Vec<(u64, f32)>> {
        check_dim(self.d, x.len())?;
        let mut top = TopK::new(k);
        for &id in candidates {
            let s = self.score(id, x, metric).ok_or(Error::MissingId(id))?;
            top.offer(s, id);
        }
        Ok(top.into_sorted())
    }

    /// Rows sorted by id, optionally skipping some ids.
    pub fn write_to<W: Write>(&self, w: &mut W, skip: impl Fn(u64) -> bool) -> Result<()> {
        let ids: Vec<u64> = self.ids().into_iter().filter(|&id| !skip(id)).collect();
        w.write_all(FULL_MAGIC)?;
        write_u32(w, self.d as u32)?;
        write_u64(w, ids.len() as u64)?;
        for id in ids {
            write_u64(w, id)?;
            let v = self.vectors.get(&id).expect("id listed above");
            write_f32s(w, &v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, FULL_MAGIC)?;
        let d = read_u32(r)? as usize;
        let n = to_len(read_u64(r)?, "vector count")?;
        let store = Self::new(d);
        for _ in 0..n {
            let id = read_u64(r)?;
            let v = read_f32s(r, d)?;
            store.insert(id, &v).map_err(|e| Error::Format(format!("full-vector file: {e}")))?;
        }
        Ok(store)
    }
}

/// The compressed part of the index: partitions plus both parameter sets.
#[derive(Debug)]
pub struct FilterIndex {
    metric: Metric,
    insert_params: Arc<ParamSet>,
    search_params: RwLock<Arc<ParamSet>>,
    partitions: PartitionSet,
}

impl FilterIndex {
    pub fn new(insert_params: ParamSet, metric: Metric) -> Self {
        let partitions = PartitionSet::new(insert_params.n_partitions(), insert_params.m());
        let insert_params = Arc::new(insert_params);
        Self { metric, search_params: RwLock::new(insert_params.clone()), insert_params, partitions }
    }

    fn from_parts(insert: ParamSet, search: ParamSet, metric: Metric, partitions: PartitionSet) -> Result<Self> {
        insert.check_compatible(&search)?;
        if partitions.num_partitions() != insert.n_partitions() || partitions.m() != insert.m() {
            return Err(Error::Format("partition file does not match parameters".into()));
        }
        let insert_params = Arc::new(insert);
        let search_params = if search == *insert_params { insert_params.clone() } else { Arc::new(search) };
        Ok(Self { metric, insert_params, search_params: RwLock::new(search_params), partitions })
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn dim(&self) -> usize {
        self.insert_params.input_dim()
    }

    pub fn insert_params(&self) -> &ParamSet {
        &self.insert_params
    }

    /// Snapshot of the current search parameters.
    pub fn search_params(&self) -> Arc<ParamSet> {
        self.search_params.read().clone()
    }

    pub fn partitions(&self) -> &PartitionSet {
        &self.partitions
    }

    /// Partition and code for `v` under the insert parameters.
    pub fn encode(&self, v: &[f32]) -> Result<(usize, PqCode)> {
        check_dim(self.dim(), v.len())?;
        ensure_finite(v)?;
        Ok(self.encode_unchecked(v))
    }

    fn encode_unchecked(&self, v: &[f32]) -> (usize, PqCode) {
        let p = &self.insert_params;
        let mut x_r = vec![0f32; p.reduced_dim()];
        p.transform.apply_into(v, &mut x_r);
        let pid = assign_unchecked(p.ivf.centroids(), &x_r, self.metric);
        (pid, p.pq.encode_unchecked(&x_r))
    }

    pub fn add_encoded(&self, id: u64, pid: usize, code: &PqCode) -> Result<()> {
        self.partitions.append(pid, id, code)
    }

    pub fn insert(&self, id: u64, v: &[f32]) -> Result<usize> {
        let (pid, code) = self.encode(v)?;
        self.partitions.append(pid, id, &code)?;
        Ok(pid)
    }

    /// Encode rows in parallel and append them in order.
    pub fn insert_batch(&self, ids: &[u64], vectors: &Matrix) -> Result<Vec<usize>> {
        check_dim(self.dim(), vectors.cols())?;
        if ids.len() != vectors.rows() {
            return Err(Error::InvalidArgument(format!("{} ids for {} vectors", ids.len(), vectors.rows())));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite);
        }
        let encoded: Vec<(usize, PqCode)> =
            (0..vectors.rows()).into_par_iter().map(|i| self.encode_unchecked(vectors.row(i))).collect();
        let mut pids = Vec::with_capacity(ids.len());
        for (&id, (pid, code)) in ids.iter().zip(encoded) {
            self.partitions.append(pid, id, &code)?;
            pids.push(pid);
        }
        Ok(pids)
    }

    pub fn delete(&self, ids: &[u64]) -> usize {
        self.partitions.delete(ids)
    }

    pub fn install_search_params(&self, params: ParamSet) -> Result<()> {
        self.insert_params.check_compatible(&params)?;
        *self.search_params.write() = Arc::new(params);
        Ok(())
    }

    pub fn filter(&self, x: &[f32], cfg: &SearchConfig) -> Result<FilterResult> {
        let params = self.search_params();
        self.filter_with(&params, x, cfg)
    }

    /// Filter stage against an explicit parameter snapshot.
    pub fn filter_with(&self, params: &ParamSet, x: &[f32], cfg: &SearchConfig) -> Result<FilterResult> {
        cfg.validate()?;
        check_dim(params.input_dim(), x.len())?;
        ensure_finite(x)?;
        let x_r = params.transform.apply(x)?;
        self.filter_reduced(params, &x_r, cfg)
    }

    /// Filter several queries under one parameter snapshot, reducing them
    /// with a single batched transform. Each result equals the one
    /// [`FilterIndex::filter_with`] gives for that query alone.
    pub fn filter_batch(&self, xs: &Matrix, cfgs: &[SearchConfig]) -> Result<Vec<Result<FilterResult>>> {
        let params = self.search_params();
        check_dim(params.input_dim(), xs.cols())?;
        if cfgs.len() != xs.rows() {
            return Err(Error::InvalidArgument(format!("{} configs for {} queries", cfgs.len(), xs.rows())));
        }
        let reduced = params.transform.apply_batch(xs)?;
        Ok((0..xs.rows())
            .map(|i| {
                cfgs[i].validate()?;
                ensure_finite(xs.row(i))?;
                self.filter_reduced(&params, reduced.row(i), &cfgs[i])
            })
            .collect())
    }

    fn filter_reduced(&self, params: &ParamSet, x_r: &[f32], cfg: &SearchConfig) -> Result<FilterResult> {
        let mut lut = compute_lut_unchecked(&params.pq, x_r, self.metric);
        if cfg.quantize_lut {
            lut = lut.with_quantization();
        }
        let ranked = rank_top(x_r, &params.ivf, self.metric, cfg.use_q8, cfg.nprobe);
        let mut collector = TopK::new(cfg.k_prime());
        let mut et = EarlyTermination::new(cfg.et_threshold(), cfg.et_nt);
        let mut scanned = 0;
        for (pid, _) in ranked {
            let added = self.partitions.scan(pid, &lut, &mut collector)?;
            scanned += 1;
            if cfg.et_enabled && et.update(added) == EtDecision::Stop {
                break;
            }
        }
        Ok(FilterResult { candidates: collector.into_sorted(), partitions_scanned: scanned })
    }

    /// Compacted image of the partitions and both parameter sets.
    fn write_parts(&self, dir: &Path) -> Result<()> {
        self.insert_params.save(dir.join("insert_params.bin"))?;
        self.search_params().save(dir.join("search_params.bin"))?;
        let mut w = BufWriter::new(File::create(dir.join("partitions.bin"))?);
        self.partitions.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub n_partitions: usize,
    pub d_r: usize,
    pub m: usize,
    pub opq_iters: usize,
    pub train_sample: usize,
    pub seed: u64,
    pub metric: Metric,
}

impl BuildConfig {
    pub fn new(n_partitions: usize, d_r: usize, m: usize) -> Self {
        Self { n_partitions, d_r, m, opq_iters: 10, train_sample: 100_000, seed: 0, metric: Metric::InnerProduct }
    }
}

/// Learn the base parameters on a sample of `ds`: OPQ for the transform and
/// codebook, then k-means on the transformed sample for the IVF centroids.
pub fn train_base_params(ds: &Dataset, cfg: &BuildConfig) -> Result<ParamSet> {
    if cfg.n_partitions == 0 {
        return Err(Error::InvalidArgument("need at least one partition".into()));
    }
    if cfg.n_partitions > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} partitions requested for {} vectors",
            cfg.n_partitions,
            ds.len()
        )));
    }
    let n = cfg.train_sample.clamp(cfg.n_partitions, ds.len());
    let train = sample(ds, n, cfg.seed)?;
    let opq = opq_init(train.vectors(), cfg.d_r, cfg.m, cfg.opq_iters, cfg.seed)?;
    if opq.degenerate {
        log::warn!("base build: training sample is rank deficient, using the PCA-truncated transform");
    }
    log::info!("opq reconstruction error: {:?}", opq.errors);
    let reduced = opq.transform.apply_batch(train.vectors())?;
    let centroids = kmeans_train(&reduced, &KMeansConfig::new(cfg.n_partitions, cfg.seed.wrapping_add(1)))?;
    ParamSet::new(opq.transform, IvfCentroids::new(centroids)?, opq.codebook)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub d: usize,
    pub d_r: usize,
    pub m: usize,
    pub n_partitions: usize,
    pub metric: Metric,
    pub vectors: usize,
    pub partition_lens: Vec<usize>,
}

/// Sizes in bytes of each index component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub transform_bytes: u64,
    pub ivf_bytes: u64,
    pub pq_bytes: u64,
    pub codes_bytes: u64,
    pub full_bytes: u64,
}

impl MemoryReport {
    /// Cost model for `n` vectors with both parameter sets resident.
    pub fn from_shape(d: u64, d_r: u64, n_partitions: u64, n: u64, dsub: u64) -> Self {
        Self {
            transform_bytes: 2 * 4 * d * d_r + 4 * d_r,
            ivf_bytes: n_partitions * 4 * d_r + n_partitions * d_r,
            pq_bytes: 2 * 16 * 4 * d_r,
            codes_bytes: n * (d_r / dsub) / 2,
            full_bytes: n * 4 * d,
        }
    }

    pub fn filter_bytes(&self) -> u64 {
        self.transform_bytes + self.ivf_bytes + self.pq_bytes + self.codes_bytes
    }

    pub fn total(&self) -> u64 {
        self.filter_bytes() + self.full_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchOutput {
    pub results: Vec<(u64, f32)>,
    pub candidates: usize,
    pub partitions_scanned: usize,
}

/// Filter index plus full vectors on one node.
#[derive(Debug)]
pub struct Index {
    filter: FilterIndex,
    full: FullVectorStore,
}

impl Index {
    pub fn new(params: ParamSet, metric: Metric) -> Self {
        let d = params.input_dim();
        Self { filter: FilterIndex::new(params, metric), full: FullVectorStore::new(d) }
    }

    pub fn build_base(ds: &Dataset, cfg: &BuildConfig) -> Result<Self> {
        let params = train_base_params(ds, cfg)?;
        let idx = Self::new(params, cfg.metric);
        idx.insert_batch(ds)?;
        Ok(idx)
    }

    pub fn filter_index(&self) -> &FilterIndex {
        &self.filter
    }

    pub fn full_store(&self) -> &FullVectorStore {
        &self.full
    }

    pub fn metric(&self) -> Metric {
        self.filter.metric
    }

    pub fn dim(&self) -> usize {
        self.filter.dim()
    }

    pub fn insert_params(&self) -> &ParamSet {
        self.filter.insert_params()
    }

    pub fn search_params(&self) -> Arc<ParamSet> {
        self.filter.search_params()
    }

    /// Live (not deleted) vectors.
    pub fn len(&self) -> usize {
        self.filter.partitions.live_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, id: u64, v: &[f32]) -> Result<usize> {
        let (pid, code) = self.filter.encode(v)?;
        if self.filter.partitions.contains(id) {
            return Err(Error::DuplicateId(id));
        }
        self.full.insert(id, v)?;
        if let Err(e) = self.filter.add_encoded(id, pid, &code) {
            self.full.remove(id);
            return Err(e);
        }
        Ok(pid)
    }

    pub fn insert_batch(&self, ds: &Dataset) -> Result<Vec<usize>> {
        check_dim(self.dim(), ds.dim())?;
        if let Some(&id) = ds.ids().iter().find(|&&id| self.filter.partitions.contains(id) || self.full.contains(id)) {
            return Err(Error::DuplicateId(id));
        }
        for (id, v) in ds.iter() {
            self.full.insert(id, v)?;
        }
        self.filter.insert_batch(ds.ids(), ds.vectors())
    }

    pub fn delete(&self, id: u64) {
        self.filter.delete(&[id]);
    }

    pub fn delete_many(&self, ids: &[u64]) -> usize {
        self.filter.delete(ids)
    }

    pub fn install_search_params(&self, params: ParamSet) -> Result<()> {
        self.filter.install_search_params(params)
    }

    pub fn filter_stage(&self, x: &[f32], cfg: &SearchConfig) -> Result<FilterResult> {
        self.filter.filter(x, cfg)
    }

    pub fn refine_stage(&self, x: &[f32], candidates: &[u64], k: usize) -> Result<Vec<(u64, f32)>> {
        self.full.refine(x, candidates, k, self.metric())
    }

    pub fn search(&self, x: &[f32], cfg: &SearchConfig) -> Result<SearchOutput> {
        let f = self.filter_stage(x, cfg)?;
        let ids: Vec<u64> = f.candidates.iter().map(|c| c.0).collect();
        let results = self.refine_stage(x, &ids, cfg.k)?;
        Ok(SearchOutput { results, candidates: ids.len(), partitions_scanned: f.partitions_scanned })
    }

    pub fn search_batch(&self, queries: &Matrix, cfg: &SearchConfig) -> Result<Vec<SearchOutput>> {
        (0..queries.rows()).into_par_iter().map(|i| self.search(queries.row(i), cfg)).collect()
    }

    pub fn memory_report(&self) -> MemoryReport {
        let p = self.insert_params();
        MemoryReport::from_shape(
            p.input_dim() as u64,
            p.reduced_dim() as u64,
            p.n_partitions() as u64,
            self.filter.partitions.total_len() as u64,
            p.pq.dsub() as u64,
        )
    }

    /// Write a compacted checkpoint directory. Deleted vectors are left out
    /// of every file.
    pub fn checkpoint(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.filter.write_parts(dir)?;
        let parts = &self.filter.partitions;
        let mut w = BufWriter::new(File::create(dir.join("full.bin"))?);
        self.full.write_to(&mut w, |id| parts.is_deleted(id) || !parts.contains(id))?;
        w.flush()?;
        let p = self.insert_params();
        let dead: std::collections::HashSet<u64> = parts.tombstones().into_iter().collect();
        let partition_lens: Vec<usize> = (0..p.n_partitions())
            .map(|pid| parts.partition(pid).map_or(0, |q| q.ids().iter().filter(|id| !dead.contains(id)).count()))
            .collect();
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            d: p.input_dim(),
            d_r: p.reduced_dim(),
            m: p.m(),
            n_partitions: p.n_partitions(),
            metric: self.metric(),
            vectors: partition_lens.iter().sum(),
            partition_lens,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let filter = load_filter(dir, &manifest)?;
        let full = FullVectorStore::read_from(&mut BufReader::new(File::open(dir.join("full.bin"))?))?;
        check_dim(manifest.d, full.dim())?;
        if full.len() != filter.partitions.total_len() {
            return Err(Error::Format(format!(
                "{} full vectors for {} indexed ids",
                full.len(),
                filter.partitions.total_len()
            )));
        }
        Ok(Self { filter, full })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Load only the compressed part of a checkpoint.
pub fn load_filter(dir: &Path, manifest: &Manifest) -> Result<FilterIndex> {
    let insert = ParamSet::load(dir.join("insert_params.bin"))?;
    let search = ParamSet::load(dir.join("search_params.bin"))?;
    let partitions = PartitionSet::read_from(&mut BufReader::new(File::open(dir.join("partitions.bin"))?))?;
    let shape = (insert.input_dim(), insert.reduced_dim(), insert.m(), insert.n_partitions());
    if shape != (manifest.d, manifest.d_r, manifest.m, manifest.n_partitions) {
        return Err(Error::Format("manifest does not match the stored parameters".into()));
    }
    FilterIndex::from_parts(insert, search, manifest.metric, partitions)
}

impl FilterIndex {
    /// Write the compressed part of a checkpoint along with a manifest.
    pub fn checkpoint(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.write_parts(dir)?;
        let back = PartitionSet::read_from(&mut BufReader::new(File::open(dir.join("partitions.bin"))?))?;
        let p = self.insert_params();
        let partition_lens = back.lens();
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            d: p.input_dim(),
            d_r: p.reduced_dim(),
            m: p.m(),
            n_partitions: p.n_partitions(),
            metric: self.metric,
            vectors: partition_lens.iter().sum(),
            partition_lens,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        load_filter(dir, &read_manifest(dir)?)
    }
}
