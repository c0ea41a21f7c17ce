//! Python bindings: build, train, search and serve indexes from Python.
//!
//! Vectors cross the boundary as lists of floats (anything iterable works,
//! including NumPy arrays).

use std::collections::HashMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use sieve_bench::{BenchError, SynthConfig};
use sieve_core::index::{BuildConfig, SearchConfig};
use sieve_core::train::{prepare_training_set, search_params, train, TrainConfig};
use sieve_core::{Dataset, Error as CoreError, Matrix, Metric};
use sieve_net::{BatchConfig, NetError, ShardingKind};

fn core_err(e: CoreError) -> PyErr {
    match e {
        CoreError::Io(_) | CoreError::Format(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn net_err(e: NetError) -> PyErr {
    match e {
        NetError::BadRequest(_) | NetError::Duplicate(_) | NetError::Incompatible(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn bench_err(e: BenchError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn metric(name: &str) -> PyResult<Metric> {
    name.parse().map_err(core_err)
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(core_err)
}

fn rows(m: &Matrix) -> Vec<Vec<f32>> {
    m.iter_rows().map(<[f32]>::to_vec).collect()
}

fn search_config(
    k: usize,
    k_factor: usize,
    nprobe: usize,
    et_t: Option<f32>,
    et_nt: Option<usize>,
    use_q8: bool,
) -> PyResult<SearchConfig> {
    let mut cfg = SearchConfig { use_q8, ..SearchConfig::new(k, k_factor, nprobe) };
    if et_t.is_some() || et_nt.is_some() {
        cfg = cfg.with_early_termination(et_t, et_nt.unwrap_or(10));
    }
    cfg.validate().map_err(core_err)?;
    Ok(cfg)
}

/// A transform, IVF centroids and PQ codebook.
#[pyclass(module = "sieve", frozen, skip_from_py_object)]
#[derive(Clone)]
struct ParamSet {
    inner: sieve_core::index::ParamSet,
}

#[pymethods]
impl ParamSet {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: sieve_core::index::ParamSet::load(path).map_err(core_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(core_err)
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn d_r(&self) -> usize {
        self.inner.reduced_dim()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn n_partitions(&self) -> usize {
        self.inner.n_partitions()
    }

    fn __repr__(&self) -> String {
        format!("ParamSet(d={}, d_r={}, m={}, n_partitions={})", self.d(), self.d_r(), self.m(), self.n_partitions())
    }
}

/// Result of `Index.train`.
#[pyclass(module = "sieve", frozen, get_all)]
struct TrainResult {
    params: ParamSet,
    /// `(epoch, train_loss, val_loss)` per epoch; epoch 0 is the start.
    history: Vec<(usize, f64, f64)>,
    best_epoch: usize,
}

#[pyclass(module = "sieve", frozen)]
struct Index {
    inner: sieve_core::index::Index,
}

#[pymethods]
impl Index {
    /// Build a base index. Ids default to `0..len(vectors)`.
    #[staticmethod]
    #[pyo3(signature = (vectors, n_partitions, d_r, m, metric="ip", ids=None, opq_iters=10, train_sample=100_000, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn build(
        py: Python<'_>,
        vectors: Vec<Vec<f32>>,
        n_partitions: usize,
        d_r: usize,
        m: usize,
        metric: &str,
        ids: Option<Vec<u64>>,
        opq_iters: usize,
        train_sample: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let metric = self::metric(metric)?;
        let vectors = matrix(vectors)?;
        let ds = match ids {
            Some(ids) => Dataset::new(vectors, ids),
            None => Dataset::with_sequential_ids(vectors),
        }
        .map_err(core_err)?;
        let cfg = BuildConfig { opq_iters, train_sample, seed, metric, ..BuildConfig::new(n_partitions, d_r, m) };
        let inner = py.detach(|| sieve_core::index::Index::build_base(&ds, &cfg)).map_err(core_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(py: Python<'_>, path: &str) -> PyResult<Self> {
        Ok(Self { inner: py.detach(|| sieve_core::index::Index::load(path)).map_err(core_err)? })
    }

    /// Write a compacted checkpoint directory.
    fn checkpoint(&self, py: Python<'_>, path: &str) -> PyResult<usize> {
        Ok(py.detach(|| self.inner.checkpoint(path)).map_err(core_err)?.vectors)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn metric(&self) -> &'static str {
        match self.inner.metric() {
            Metric::InnerProduct => "ip",
            Metric::EuclideanSquared => "l2",
        }
    }

    /// Top-k `(id, score)` pairs, best first. L2 scores are negated
    /// squared distances.
    #[pyo3(signature = (query, k=10, k_factor=10, nprobe=1, et_t=None, et_nt=None, use_q8=true))]
    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        py: Python<'_>,
        query: Vec<f32>,
        k: usize,
        k_factor: usize,
        nprobe: usize,
        et_t: Option<f32>,
        et_nt: Option<usize>,
        use_q8: bool,
    ) -> PyResult<Vec<(u64, f32)>> {
        let cfg = search_config(k, k_factor, nprobe, et_t, et_nt, use_q8)?;
        Ok(py.detach(|| self.inner.search(&query, &cfg)).map_err(core_err)?.results)
    }

    #[pyo3(signature = (queries, k=10, k_factor=10, nprobe=1, et_t=None, et_nt=None, use_q8=true))]
    #[allow(clippy::too_many_arguments)]
    fn search_batch(
        &self,
        py: Python<'_>,
        queries: Vec<Vec<f32>>,
        k: usize,
        k_factor: usize,
        nprobe: usize,
        et_t: Option<f32>,
        et_nt: Option<usize>,
        use_q8: bool,
    ) -> PyResult<Vec<Vec<(u64, f32)>>> {
        let cfg = search_config(k, k_factor, nprobe, et_t, et_nt, use_q8)?;
        let q = matrix(queries)?;
        let out = py.detach(|| self.inner.search_batch(&q, &cfg)).map_err(core_err)?;
        Ok(out.into_iter().map(|o| o.results).collect())
    }

    /// Insert one vector; returns its partition.
    fn insert(&self, py: Python<'_>, id: u64, vector: Vec<f32>) -> PyResult<usize> {
        py.detach(|| self.inner.insert(id, &vector)).map_err(core_err)
    }

    /// Tombstone ids; returns how many were live.
    fn delete(&self, ids: Vec<u64>) -> usize {
        self.inner.delete_many(&ids)
    }

    fn insert_params(&self) -> ParamSet {
        ParamSet { inner: self.inner.insert_params().clone() }
    }

    fn search_params(&self) -> ParamSet {
        ParamSet { inner: (*self.inner.search_params()).clone() }
    }

    fn install_search_params(&self, params: &ParamSet) -> PyResult<()> {
        self.inner.install_search_params(params.inner.clone()).map_err(core_err)
    }

    /// Learn search-side parameters from `n_queries` sampled vectors and
    /// their `k` neighbours. Does not install them.
    #[pyo3(signature = (n_queries=10_000, k=50, nprobe=None, k_factor=10, val_fraction=0.1, lambda_=1.0, lr=1e-3, batch=64, epochs=50, stop_delta=0.0, weight_decay=0.01, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &self,
        py: Python<'_>,
        n_queries: usize,
        k: usize,
        nprobe: Option<usize>,
        k_factor: usize,
        val_fraction: f64,
        lambda_: f64,
        lr: f64,
        batch: usize,
        epochs: usize,
        stop_delta: f64,
        weight_decay: f64,
        seed: u64,
    ) -> PyResult<TrainResult> {
        let idx = &self.inner;
        let nprobe = nprobe.unwrap_or_else(|| (idx.insert_params().n_partitions() / 10).max(1));
        let cfg = TrainConfig {
            lambda: lambda_,
            lr,
            batch,
            max_epochs: epochs,
            stop_delta,
            stop_relative: false,
            weight_decay,
            seed,
        };
        py.detach(|| {
            let ts = prepare_training_set(idx, n_queries, k, nprobe, k_factor, val_fraction, seed)?;
            let insert = idx.insert_params();
            let out = train(&ts, insert, &cfg, idx.metric())?;
            let store = idx.full_store();
            let sample: Vec<Vec<f32>> = store.ids().into_iter().filter_map(|id| store.get(id)).collect();
            let params = search_params(&Matrix::from_rows(&sample)?, insert, &out.params, idx.metric())?;
            Ok(TrainResult {
                params: ParamSet { inner: params },
                history: out.history.iter().map(|e| (e.epoch, e.train_loss, e.val_loss)).collect(),
                best_epoch: out.best_epoch,
            })
        })
        .map_err(core_err)
    }

    /// Component sizes in bytes.
    fn memory_report(&self) -> HashMap<&'static str, u64> {
        let r = self.inner.memory_report();
        HashMap::from([
            ("transform", r.transform_bytes),
            ("ivf", r.ivf_bytes),
            ("pq", r.pq_bytes),
            ("codes", r.codes_bytes),
            ("full", r.full_bytes),
            ("filter", r.filter_bytes()),
        ])
    }

    fn __repr__(&self) -> String {
        let p = self.inner.insert_params();
        format!("Index(len={}, d={}, d_r={}, n_partitions={}, metric={})", self.__len__(), p.input_dim(), p.reduced_dim(), p.n_partitions(), self.metric())
    }
}

/// Index and refine workers on localhost, serving a checkpoint.
#[pyclass(module = "sieve")]
struct LocalCluster {
    inner: Option<sieve_net::LocalCluster>,
    client: Option<sieve_net::Client>,
}

impl LocalCluster {
    fn client(&self) -> PyResult<&sieve_net::Client> {
        self.client.as_ref().ok_or_else(|| PyRuntimeError::new_err("cluster is shut down"))
    }
}

#[pymethods]
impl LocalCluster {
    #[new]
    #[pyo3(signature = (checkpoint, index_workers=1, refine_workers=1, sharding="by_id"))]
    fn new(py: Python<'_>, checkpoint: &str, index_workers: usize, refine_workers: usize, sharding: &str) -> PyResult<Self> {
        let kind = match sharding {
            "by_id" => ShardingKind::ById,
            "by_ivf" => ShardingKind::ByIvf,
            other => return Err(PyValueError::new_err(format!("unknown sharding {other:?}"))),
        };
        let cluster = py
            .detach(|| sieve_net::LocalCluster::start(checkpoint, index_workers, refine_workers, kind, BatchConfig::default()))
            .map_err(net_err)?;
        let client = cluster.client().map_err(net_err)?;
        Ok(Self { inner: Some(cluster), client: Some(client) })
    }

    /// `host:port` of every index worker, then of every refine worker.
    fn addresses(&self) -> PyResult<(Vec<String>, Vec<String>)> {
        let c = self.client()?.config();
        Ok((c.index_workers.clone(), c.refine_workers.clone()))
    }

    #[pyo3(signature = (query, k=10, k_factor=10, nprobe=1, et_t=None, et_nt=None, use_q8=true))]
    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        py: Python<'_>,
        query: Vec<f32>,
        k: usize,
        k_factor: usize,
        nprobe: usize,
        et_t: Option<f32>,
        et_nt: Option<usize>,
        use_q8: bool,
    ) -> PyResult<Vec<(u64, f32)>> {
        let cfg = search_config(k, k_factor, nprobe, et_t, et_nt, use_q8)?;
        let client = self.client()?;
        Ok(py.detach(|| client.search(&query, &cfg)).map_err(net_err)?.results)
    }

    /// Insert through the client; returns the number of index replicas
    /// that applied it.
    fn insert(&self, py: Python<'_>, id: u64, vector: Vec<f32>) -> PyResult<usize> {
        let client = self.client()?;
        Ok(py.detach(|| client.insert(id, &vector)).map_err(net_err)?.replicas_applied)
    }

    fn delete(&self, py: Python<'_>, ids: Vec<u64>) -> PyResult<()> {
        let client = self.client()?;
        py.detach(|| client.delete(&ids)).map_err(net_err)?;
        Ok(())
    }

    /// Roll parameters out to every index worker; returns their digest.
    fn install_search_params(&self, py: Python<'_>, params: &ParamSet) -> PyResult<String> {
        let client = self.client()?;
        py.detach(|| client.install_params(&params.inner)).map_err(net_err)
    }

    fn shutdown(&mut self, py: Python<'_>) {
        self.client = None;
        if let Some(c) = self.inner.take() {
            py.detach(|| c.shutdown());
        }
    }

    fn __enter__(slf: Py<Self>) -> Py<Self> {
        slf
    }

    fn __exit__(&mut self, py: Python<'_>, _t: Py<PyAny>, _v: Py<PyAny>, _tb: Py<PyAny>) {
        self.shutdown(py);
    }
}

/// Gaussian-mixture vectors and queries: `(base, queries)`.
#[pyfunction]
#[pyo3(signature = (n, d, clusters=32, n_queries=1000, std=0.5, normalize=true, seed=0))]
fn synthetic(
    n: usize,
    d: usize,
    clusters: usize,
    n_queries: usize,
    std: f32,
    normalize: bool,
    seed: u64,
) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let cfg = SynthConfig { cluster_std: std, normalize, ..SynthConfig::new(n, d, clusters, seed) };
    let (ds, q) = sieve_bench::mixture_with_queries(&cfg, n_queries).map_err(bench_err)?;
    Ok((rows(ds.vectors()), rows(&q)))
}

/// Exact top-k ids of every query over `base` (ids `0..len(base)`).
#[pyfunction]
#[pyo3(signature = (base, queries, k=10, metric="ip"))]
fn ground_truth(py: Python<'_>, base: Vec<Vec<f32>>, queries: Vec<Vec<f32>>, k: usize, metric: &str) -> PyResult<Vec<Vec<u64>>> {
    let metric = self::metric(metric)?;
    let ds = Dataset::with_sequential_ids(matrix(base)?).map_err(core_err)?;
    let q = matrix(queries)?;
    Ok(py.detach(|| sieve_bench::ground_truth(&ds, &q, k, metric)).map_err(bench_err)?.ids)
}

/// Mean fraction of the true top-k found in each result's top-k.
#[pyfunction]
fn recall(results: Vec<Vec<u64>>, truth: Vec<Vec<u64>>, k: usize) -> PyResult<f64> {
    if results.len() != truth.len() {
        return Err(PyValueError::new_err(format!("{} results for {} queries", results.len(), truth.len())));
    }
    let gt = sieve_bench::GroundTruth { k, scores: truth.iter().map(|r| vec![0.0; r.len()]).collect(), ids: truth };
    Ok(sieve_bench::recall_at(&results, &gt, k))
}

#[pymodule]
fn sieve(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Index>()?;
    m.add_class::<ParamSet>()?;
    m.add_class::<TrainResult>()?;
    m.add_class::<LocalCluster>()?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(recall, m)?)?;
    Ok(())
}
