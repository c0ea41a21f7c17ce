use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sieve_bench::backend::Backend;
use sieve_bench::formats::{self, Format};
use sieve_bench::rw::{run_readwrite, WorkloadSpec};
use sieve_bench::sweep::{self, SweepGrid, SweepOptions};
use sieve_bench::{ground_truth, mixture_with_queries, GroundTruth, SynthConfig};
use sieve_core::index::{BuildConfig, Index, ParamSet, SearchConfig};
use sieve_core::train::{prepare_training_set, search_params, train, TrainConfig};
use sieve_core::{Dataset, Matrix, Metric};
use sieve_net::{serve_index, serve_refine, BatchConfig, Client, ClusterConfig, IndexWorker, RefineWorker, Sharding};

#[derive(Parser)]
#[command(name = "sieve", version, about = "Build, tune, serve and measure sieve indexes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a Gaussian-mixture base set and queries as .fvecs.
    Synth(SynthArgs),
    /// Convert a vector file to .fvecs.
    Ingest(IngestArgs),
    /// Exact top-k of every query.
    Gt(GtArgs),
    /// Build a base index and write a checkpoint.
    Build(BuildArgs),
    /// Learn search-side parameters for a checkpoint.
    Train(TrainArgs),
    /// Recall and throughput over a grid of search settings.
    Sweep(SweepArgs),
    /// Mixed read/write workload with a consistency audit.
    Rw(RwArgs),
    /// Serve a checkpoint's compressed index.
    ServeIndex(ServeIndexArgs),
    /// Serve one shard of a checkpoint's full vectors.
    ServeRefine(ServeRefineArgs),
    /// Roll a parameter file out to every index worker of a cluster.
    Install(InstallArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 32)]
    clusters: usize,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long, default_value_t = 0.5)]
    std: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    base: PathBuf,
    #[arg(long = "queries-out")]
    queries_out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    input: PathBuf,
    /// fvecs, bvecs, ivecs or raw; guessed from the extension if absent.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GtArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value = "ip")]
    metric: Metric,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    partitions: usize,
    #[arg(long = "d-r")]
    d_r: usize,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value = "ip")]
    metric: Metric,
    #[arg(long, default_value_t = 10)]
    opq_iters: usize,
    #[arg(long, default_value_t = 100_000)]
    sample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint directory.
    #[arg(long)]
    index: PathBuf,
    /// Where to write the learned parameter set.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    queries: usize,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 32)]
    nprobe: usize,
    #[arg(long, default_value_t = 10)]
    k_factor: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    stop_delta: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch losses as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also replace the checkpoint's search parameters.
    #[arg(long)]
    install: bool,
}

#[derive(Args)]
struct Target {
    /// Local checkpoint directory.
    #[arg(long, conflicts_with = "cluster")]
    index: Option<PathBuf>,
    /// Cluster configuration JSON.
    #[arg(long)]
    cluster: Option<PathBuf>,
}

enum Loaded {
    Local(Index),
    Remote(Client),
}

impl Target {
    fn open(&self) -> Result<Loaded> {
        match (&self.index, &self.cluster) {
            (Some(dir), _) => Ok(Loaded::Local(Index::load(dir).with_context(|| format!("loading {}", dir.display()))?)),
            (None, Some(cfg)) => Ok(Loaded::Remote(Client::new(ClusterConfig::load(cfg)?)?)),
            (None, None) => bail!("give --index or --cluster"),
        }
    }
}

impl Loaded {
    fn backend(&self) -> &dyn Backend {
        match self {
            Loaded::Local(i) => i,
            Loaded::Remote(c) => c,
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    target: Target,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// JSON grid; overrides the grid flags.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8, 16, 32, 64])]
    nprobe: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [10])]
    k_factor: Vec<usize>,
    /// Early-termination threshold; defaults to k'/200 when --et-nt is set.
    #[arg(long)]
    et_t: Option<f32>,
    #[arg(long)]
    et_nt: Option<usize>,
    #[arg(long)]
    no_q8: bool,
    #[arg(long, default_value_t = 1)]
    clients: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RwArgs {
    #[command(flatten)]
    target: Target,
    /// Vectors the target holds; needed with --cluster.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    queries: PathBuf,
    /// Vectors to insert.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value = "ip")]
    metric: Metric,
    #[arg(long, default_value_t = 0.8)]
    read_ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    insert_share: f64,
    #[arg(long, default_value_t = 8)]
    clients: usize,
    #[arg(long)]
    seconds: Option<f64>,
    #[arg(long)]
    ops: Option<usize>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    k_factor: usize,
    #[arg(long, default_value_t = 16)]
    nprobe: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long, default_value_t = 1000)]
    window_us: u64,
    #[arg(long, default_value_t = 64)]
    max_batch: usize,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ServeIndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7000")]
    addr: String,
    #[command(flatten)]
    batch: BatchArgs,
}

#[derive(Args)]
struct ServeRefineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7100")]
    addr: String,
    #[arg(long, default_value_t = 0)]
    shard: usize,
    #[arg(long, default_value_t = 1)]
    shards: usize,
    /// Take the sharding policy from a cluster configuration.
    #[arg(long, conflicts_with = "sharding")]
    cluster: Option<PathBuf>,
    /// by-id, or by-ivf with a round-robin partition map.
    #[arg(long, default_value = "by-id")]
    sharding: String,
}

#[derive(Args)]
struct InstallArgs {
    #[arg(long)]
    cluster: PathBuf,
    #[arg(long)]
    params: PathBuf,
}

fn read_vectors(path: &Path) -> Result<Matrix> {
    let format = Format::from_path(path).unwrap_or(Format::Fvecs);
    let ds = formats::ingest(path, format, None, false).with_context(|| format!("reading {}", path.display()))?;
    Ok(ds.into_parts().0)
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Ok(Dataset::with_sequential_ids(read_vectors(path)?)?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig { cluster_std: a.std, normalize: a.normalize, ..SynthConfig::new(a.n, a.d, a.clusters, a.seed) };
    let (ds, q) = mixture_with_queries(&cfg, a.queries)?;
    formats::write_fvecs(&a.base, ds.vectors())?;
    formats::write_fvecs(&a.queries_out, &q)?;
    println!("wrote {} base and {} query vectors of dimension {}", ds.len(), q.rows(), a.d);
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let format = match &a.format {
        Some(f) => f.parse()?,
        None => Format::from_path(&a.input).context("cannot guess the format; pass --format")?,
    };
    let ds = formats::ingest(&a.input, format, a.dim, a.normalize)?;
    formats::write_fvecs(&a.out, ds.vectors())?;
    println!("{} vectors of dimension {}", ds.len(), ds.dim());
    Ok(())
}

fn gt(a: GtArgs) -> Result<()> {
    let ds = read_dataset(&a.base)?;
    let q = read_vectors(&a.queries)?;
    let t = Instant::now();
    let gt = ground_truth(&ds, &q, a.k, a.metric)?;
    gt.save(&a.out)?;
    println!("top-{} of {} queries over {} vectors in {:.1}s", a.k, q.rows(), ds.len(), t.elapsed().as_secs_f64());
    Ok(())
}

fn build(a: BuildArgs) -> Result<()> {
    let ds = read_dataset(&a.base)?;
    let cfg = BuildConfig {
        opq_iters: a.opq_iters,
        train_sample: a.sample,
        seed: a.seed,
        metric: a.metric,
        ..BuildConfig::new(a.partitions, a.d_r, a.m)
    };
    let t = Instant::now();
    let idx = Index::build_base(&ds, &cfg)?;
    let manifest = idx.checkpoint(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&idx.memory_report())?);
    println!("built {} vectors into {} partitions in {:.1}s", manifest.vectors, manifest.n_partitions, t.elapsed().as_secs_f64());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let idx = Index::load(&a.index)?;
    let ts = prepare_training_set(&idx, a.queries, a.k, a.nprobe, a.k_factor, a.val_fraction, a.seed)?;
    log::info!("training set: {} train, {} validation queries", ts.n_train(), ts.n_validation());
    let cfg = TrainConfig {
        lambda: a.lambda,
        lr: a.lr,
        batch: a.batch,
        max_epochs: a.epochs,
        stop_delta: a.stop_delta,
        stop_relative: false,
        weight_decay: a.weight_decay,
        seed: a.seed,
    };
    let insert = idx.insert_params().clone();
    let out = train(&ts, &insert, &cfg, idx.metric())?;
    if let Some(path) = &a.log {
        out.write_csv(&mut BufWriter::new(File::create(path)?))?;
    }
    let store = idx.full_store();
    let ids = store.ids();
    let sample: Vec<Vec<f32>> = ids.iter().filter_map(|&id| store.get(id)).collect();
    let params = search_params(&Matrix::from_rows(&sample)?, &insert, &out.params, idx.metric())?;
    params.save(&a.out)?;
    println!(
        "validation loss {:.5} -> {:.5} (best epoch {})",
        out.initial_val_loss(),
        out.best_val_loss(),
        out.best_epoch
    );
    if a.install {
        idx.install_search_params(params)?;
        idx.checkpoint(&a.index)?;
        println!("installed into {}", a.index.display());
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let target = a.target.open()?;
    let q = read_vectors(&a.queries)?;
    let grid = match &a.spec {
        Some(p) => serde_json::from_str::<SweepGrid>(&std::fs::read_to_string(p)?)?,
        None => SweepGrid {
            k: a.k,
            nprobe: a.nprobe.clone(),
            k_factor: a.k_factor.clone(),
            early_termination: match a.et_nt {
                Some(nt) => vec![Some((a.et_t, nt))],
                None => vec![None],
            },
            use_q8: a.no_q8.then_some(false),
        },
    };
    let gt = GroundTruth::load(&a.gt)?;
    if gt.k < grid.k {
        bail!("ground truth holds {} neighbours, k = {}", gt.k, grid.k);
    }
    let rows = sweep::sweep(
        target.backend(),
        &q,
        &gt.truncated(grid.k),
        &grid.configs(),
        &SweepOptions { clients: a.clients, warmup: a.warmup },
    )?;
    match &a.out {
        Some(p) => sweep::write_csv(&rows, File::create(p)?)?,
        None => sweep::write_csv(&rows, std::io::stdout())?,
    }
    Ok(())
}

fn rw_cmd(a: RwArgs) -> Result<()> {
    let target = a.target.open()?;
    let base = match (&a.base, &target) {
        (Some(p), _) => read_dataset(p)?,
        (None, Loaded::Local(idx)) => {
            let store = idx.full_store();
            let mut ids = store.ids();
            ids.sort_unstable();
            let rows: Vec<Vec<f32>> = ids.iter().map(|&id| store.get(id).expect("listed id")).collect();
            Dataset::new(Matrix::from_rows(&rows)?, ids)?
        }
        (None, Loaded::Remote(_)) => bail!("--base is required with --cluster"),
    };
    let spec = WorkloadSpec {
        insert_share: a.insert_share,
        duration: a.seconds.map(Duration::from_secs_f64),
        ops: a.ops,
        seed: a.seed,
        ..WorkloadSpec::new(a.read_ratio, a.clients, SearchConfig::new(a.k, a.k_factor, a.nprobe))
    };
    let report = run_readwrite(
        target.backend(),
        &base,
        &read_vectors(&a.queries)?,
        &read_vectors(&a.pool)?,
        a.metric,
        &spec,
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => std::fs::write(p, &json)?,
        None => println!("{json}"),
    }
    if !report.is_sound() {
        bail!("audit failed");
    }
    Ok(())
}

fn batch_config(a: &BatchArgs) -> BatchConfig {
    let mut cfg = BatchConfig { window: Duration::from_micros(a.window_us), max_batch: a.max_batch, ..BatchConfig::default() };
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    cfg
}

fn serve_index_cmd(a: ServeIndexArgs) -> Result<()> {
    let worker = IndexWorker::from_checkpoint(&a.checkpoint, batch_config(&a.batch))?;
    let handle = serve_index(Arc::new(worker), &a.addr)?;
    println!("index worker listening on {}", handle.addr());
    handle.wait()?;
    Ok(())
}

fn serve_refine_cmd(a: ServeRefineArgs) -> Result<()> {
    let sharding = match &a.cluster {
        Some(p) => ClusterConfig::load(p)?.sharding,
        None => match a.sharding.as_str() {
            "by-id" => Sharding::ById,
            "by-ivf" => {
                let manifest = sieve_core::index::read_manifest(&a.checkpoint)?;
                Sharding::by_ivf_round_robin(manifest.n_partitions, a.shards)
            }
            other => bail!("unknown sharding {other:?}"),
        },
    };
    if a.shard >= a.shards {
        bail!("shard {} of {}", a.shard, a.shards);
    }
    let worker = RefineWorker::from_index_checkpoint(&a.checkpoint, a.shard, a.shards, &sharding)?;
    log::info!("shard {} holds {} vectors", a.shard, worker.store().len());
    let handle = serve_refine(Arc::new(worker), &a.addr)?;
    println!("refine worker {} listening on {}", a.shard, handle.addr());
    handle.wait()?;
    Ok(())
}

fn install(a: InstallArgs) -> Result<()> {
    let client = Client::new(ClusterConfig::load(&a.cluster)?)?;
    let params = ParamSet::load(&a.params)?;
    let digest = client.install_params(&params)?;
    println!("installed on {} index workers, digest {digest}", client.config().index_workers.len());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Ingest(a) => ingest(a),
        Cmd::Gt(a) => gt(a),
        Cmd::Build(a) => build(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Sweep(a) => sweep_cmd(a),
        Cmd::Rw(a) => rw_cmd(a),
        Cmd::ServeIndex(a) => serve_index_cmd(a),
        Cmd::ServeRefine(a) => serve_refine_cmd(a),
        Cmd::Install(a) => install(a),
    }
}
