use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sieve_core::index::{train_base_params, BuildConfig, FilterIndex, Index, ParamSet, SearchConfig};
use sieve_core::{Dataset, Matrix, Metric};
use sieve_net::config::BatchConfig;
use sieve_net::{serve_index, Client, ClusterConfig, IndexWorker, LocalCluster, NetError, Sharding, ShardingKind};
use tempfile::TempDir;

fn gaussian_mixture(n: usize, d: usize, clusters: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..clusters).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..clusters)];
            c.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect()
        })
        .collect();
    Dataset::with_sequential_ids(Matrix::from_rows(&rows).unwrap()).unwrap()
}

fn build_config(metric: Metric) -> BuildConfig {
    let mut cfg = BuildConfig::new(32, 8, 4);
    cfg.opq_iters = 2;
    cfg.metric = metric;
    cfg
}

struct Fixture {
    ds: Dataset,
    index: Index,
    dir: TempDir,
}

fn fixture(n: usize, metric: Metric) -> Fixture {
    let ds = gaussian_mixture(n, 16, 12, 11);
    let index = Index::build_base(&ds, &build_config(metric)).unwrap();
    let dir = TempDir::new().unwrap();
    index.checkpoint(dir.path()).unwrap();
    Fixture { ds, index, dir }
}

fn batch() -> BatchConfig {
    BatchConfig { threads: 2, ..BatchConfig::default() }
}

fn exhaustive(n: usize) -> SearchConfig {
    SearchConfig::new(1, n, 32)
}

fn assert_matches_local(f: &Fixture, n_index: usize, n_refine: usize, kind: ShardingKind) {
    let cluster = LocalCluster::start(f.dir.path(), n_index, n_refine, kind, batch()).unwrap();
    let client = cluster.client().unwrap();
    let cfg = SearchConfig::new(10, 8, 6);
    for i in (0..f.ds.len()).step_by(f.ds.len() / 60) {
        let x = f.ds.get(i).1;
        let local = f.index.search(x, &cfg).unwrap();
        let remote = client.search(x, &cfg).unwrap();
        assert_eq!(remote.results, local.results, "query {i}");
        assert_eq!(remote.partitions_scanned, local.partitions_scanned);
        assert!(remote.missing.is_empty());
    }
    cluster.shutdown();
}

#[test]
fn single_pair_equals_local_search() {
    assert_matches_local(&fixture(3000, Metric::InnerProduct), 1, 1, ShardingKind::ById);
}

#[test]
fn by_id_sharding_equals_local_search() {
    assert_matches_local(&fixture(3000, Metric::EuclideanSquared), 2, 4, ShardingKind::ById);
}

#[test]
fn by_ivf_sharding_equals_local_search() {
    assert_matches_local(&fixture(3000, Metric::InnerProduct), 3, 3, ShardingKind::ByIvf);
}

#[test]
fn by_ivf_candidates_route_to_owning_shard() {
    let f = fixture(2000, Metric::InnerProduct);
    let cluster = LocalCluster::start(f.dir.path(), 1, 3, ShardingKind::ByIvf, batch()).unwrap();
    let client = cluster.client().unwrap();
    let Sharding::ByIvf { partition_map } = &cluster.config.sharding else { unreachable!() };
    let parts = f.index.filter_index().partitions();
    let filtered = client.filter_on(0, f.ds.get(5).1, &SearchConfig::new(10, 50, 32)).unwrap();
    assert!(!filtered.candidates.is_empty());
    for c in &filtered.candidates {
        let id: u64 = c.id.parse().unwrap();
        assert_eq!(c.pid as usize, parts.partition_of(id).unwrap());
        let owner = partition_map[c.pid as usize];
        assert!(cluster.refine_workers[owner].store().contains(id));
        for (j, w) in cluster.refine_workers.iter().enumerate() {
            assert_eq!(w.store().contains(id), j == owner);
        }
    }
}

#[test]
fn batched_filter_equals_single_filter() {
    let f = fixture(2000, Metric::InnerProduct);
    let worker = IndexWorker::from_checkpoint(f.dir.path(), BatchConfig { threads: 1, ..BatchConfig::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let requests: Vec<(Vec<f32>, SearchConfig)> = (0..64)
        .map(|i| {
            let x = f.ds.get(rng.random_range(0..f.ds.len())).1.to_vec();
            let cfg = SearchConfig::new(5, 4 + i % 5, 1 + i % 9);
            (x, cfg)
        })
        .collect();
    let singles: Vec<_> = requests.iter().map(|(x, c)| worker.filter(x.clone(), *c).unwrap()).collect();
    let batched: Vec<_> = worker.filter_many(requests).into_iter().map(Result::unwrap).collect();
    assert_eq!(singles, batched);
    assert!(worker.stats(false).largest_batch > 1, "requests were never batched");
}

#[test]
fn insert_reaches_every_replica() {
    let f = fixture(1500, Metric::EuclideanSquared);
    let cluster = LocalCluster::start(f.dir.path(), 3, 2, ShardingKind::ById, batch()).unwrap();
    let client = cluster.client().unwrap();
    let before: Vec<usize> = (0..3).map(|i| client.index_stats(i, false).unwrap().vectors).collect();
    let v: Vec<f32> = f.ds.get(17).1.iter().map(|x| x + 0.01).collect();
    let ack = client.insert(50_000, &v).unwrap();
    assert_eq!((ack.replicas_applied, ack.replicas_total), (3, 3));
    for i in 0..3 {
        let stats = client.index_stats(i, false).unwrap();
        assert_eq!(stats.vectors, before[i] + 1);
        let sticky = Client::new(cluster.config.clone()).unwrap().with_sticky_worker(i).unwrap();
        let got = sticky.search(&v, &exhaustive(1501)).unwrap();
        assert_eq!(got.index_worker, i);
        assert_eq!(got.results[0].0, 50_000);
    }
    assert!(cluster.refine_workers[(50_000 % 2) as usize].store().contains(50_000));
}

#[test]
fn duplicate_insert_mutates_nothing() {
    let f = fixture(1000, Metric::InnerProduct);
    let cluster = LocalCluster::start(f.dir.path(), 3, 2, ShardingKind::ById, batch()).unwrap();
    let client = cluster.client().unwrap();
    let lens: Vec<Vec<usize>> = (0..3).map(|i| client.index_stats(i, false).unwrap().partition_lens).collect();
    let err = client.insert(7, f.ds.get(8).1).unwrap_err();
    assert_eq!(err.status(), 409, "{err}");
    for i in 0..3 {
        assert_eq!(client.index_stats(i, false).unwrap().partition_lens, lens[i]);
    }
    assert_eq!(cluster.refine_workers[1].store().get(7).unwrap(), f.ds.get(7).1);
}

#[test]
fn delete_is_visible_on_every_replica() {
    let f = fixture(1000, Metric::EuclideanSquared);
    let cluster = LocalCluster::start(f.dir.path(), 3, 2, ShardingKind::ById, batch()).unwrap();
    let client = cluster.client().unwrap();
    let ack = client.delete(&[3, 500, 999]).unwrap();
    assert_eq!(ack.replicas_applied, 3);
    for i in 0..3 {
        let stats = client.index_stats(i, true).unwrap();
        assert_eq!(stats.tombstones.unwrap(), vec!["3", "500", "999"]);
        assert_eq!(stats.vectors, 997);
        assert!(client.index_stats(i, false).unwrap().tombstones.is_none());
    }
    let got = client.search(f.ds.get(500).1, &SearchConfig::new(1000, 1, 32)).unwrap();
    assert_eq!(got.results.len(), 997);
    assert!(got.results.iter().all(|r| ![3, 500, 999].contains(&r.0)));
    client.delete(&[123_456]).unwrap();
    assert_eq!(client.index_stats(0, false).unwrap().vectors, 997);
}

fn other_params(ds: &Dataset, metric: Metric, d_r: usize) -> ParamSet {
    let mut cfg = build_config(metric);
    cfg.d_r = d_r;
    cfg.seed = 99;
    train_base_params(ds, &cfg).unwrap()
}

#[test]
fn installed_params_agree_across_replicas() {
    let f = fixture(2000, Metric::InnerProduct);
    let cluster = LocalCluster::start(f.dir.path(), 3, 2, ShardingKind::ById, batch()).unwrap();
    let client = cluster.client().unwrap();
    let new = other_params(&f.ds, Metric::InnerProduct, 8);
    let digest = client.install_params(&new).unwrap();
    f.index.install_search_params(new).unwrap();
    let cfg = SearchConfig::new(10, 5, 4);
    for i in 0..3 {
        assert_eq!(client.index_stats(i, false).unwrap().params_digest, digest);
    }
    for q in 0..20 {
        let x = f.ds.get(q * 37).1;
        let expected = f.index.filter_stage(x, &cfg).unwrap();
        for i in 0..3 {
            let got = client.filter_on(i, x, &cfg).unwrap();
            let ids: Vec<u64> = got.candidates.iter().map(|c| c.id.parse().unwrap()).collect();
            assert_eq!(ids, expected.candidates.iter().map(|c| c.0).collect::<Vec<_>>());
        }
        assert_eq!(client.search(x, &cfg).unwrap().results, f.index.search(x, &cfg).unwrap().results);
    }
}

#[test]
fn incompatible_install_switches_nobody() {
    let f = fixture(1000, Metric::InnerProduct);
    let cluster = LocalCluster::start(f.dir.path(), 3, 1, ShardingKind::ById, batch()).unwrap();
    let client = cluster.client().unwrap();
    let digests: Vec<String> = (0..3).map(|i| client.index_stats(i, false).unwrap().params_digest).collect();
    let err = client.install_params(&other_params(&f.ds, Metric::InnerProduct, 4)).unwrap_err();
    assert_eq!(err.status(), 409, "{err}");
    for i in 0..3 {
        assert_eq!(client.index_stats(i, false).unwrap().params_digest, digests[i]);
    }
}

#[test]
fn searches_during_rollout_use_one_parameter_set() {
    let f = fixture(2000, Metric::InnerProduct);
    let cluster = LocalCluster::start(f.dir.path(), 2, 2, ShardingKind::ById, batch()).unwrap();
    let new = other_params(&f.ds, Metric::InnerProduct, 8);
    let cfg = SearchConfig::new(10, 3, 3);
    let queries: Vec<Vec<f32>> = (0..30).map(|q| f.ds.get(q * 61).1.to_vec()).collect();
    let old_results: Vec<_> = queries.iter().map(|x| f.index.search(x, &cfg).unwrap().results).collect();
    let updated = Index::load(f.dir.path()).unwrap();
    updated.install_search_params(new.clone()).unwrap();
    let new_results: Vec<_> = queries.iter().map(|x| updated.search(x, &cfg).unwrap().results).collect();
    assert_ne!(old_results, new_results);

    let done = AtomicBool::new(false);
    std::thread::scope(|s| {
        let readers: Vec<_> = (0..3)
            .map(|_| {
                let client = cluster.client().unwrap();
                let (queries, old_results, new_results, done) = (&queries, &old_results, &new_results, &done);
                s.spawn(move || {
                    let mut rounds = 0;
                    while !done.load(Ordering::Relaxed) || rounds < 2 {
                        for (q, x) in queries.iter().enumerate() {
                            let got = client.search(x, &cfg).unwrap().results;
                            assert!(got == old_results[q] || got == new_results[q], "query {q} mixes parameter sets");
                        }
                        rounds += 1;
                    }
                })
            })
            .collect();
        std::thread::sleep(std::time::Duration::from_millis(50));
        cluster.client().unwrap().install_params(&new).unwrap();
        done.store(true, Ordering::Relaxed);
        for r in readers {
            r.join().unwrap();
        }
    });
    let client = cluster.client().unwrap();
    for (q, x) in queries.iter().enumerate() {
        assert_eq!(client.search(x, &cfg).unwrap().results, new_results[q]);
    }
}

#[test]
fn replicas_converge_to_identical_checkpoints() {
    let f = fixture(1000, Metric::InnerProduct);
    let cluster = LocalCluster::start(f.dir.path(), 3, 1, ShardingKind::ById, batch()).unwrap();
    let client = cluster.client().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for id in 10_000..10_050u64 {
        let v: Vec<f32> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        client.insert(id, &v).unwrap();
    }
    client.delete(&[1, 2, 10_010]).unwrap();
    let out = TempDir::new().unwrap();
    let images: Vec<Vec<u8>> = (0..3)
        .map(|i| {
            let dir = out.path().join(format!("replica{i}"));
            client.checkpoint_index(i, dir.to_str().unwrap()).unwrap();
            std::fs::read(dir.join("partitions.bin")).unwrap()
        })
        .collect();
    assert_eq!(images[0], images[1]);
    assert_eq!(images[0], images[2]);
}

#[test]
fn off_shard_ids_are_reported_missing() {
    let f = fixture(1000, Metric::InnerProduct);
    let cluster = LocalCluster::start(f.dir.path(), 1, 2, ShardingKind::ById, batch()).unwrap();
    let client = cluster.client().unwrap();
    let x = f.ds.get(0).1;
    let (results, missing) = client.refine_on(0, x, &[0, 2, 4, 5], 10).unwrap();
    assert_eq!(missing, vec![5]);
    let local = f.index.refine_stage(x, &[0, 2, 4], 10).unwrap();
    assert_eq!(results, local);
    let (results, missing) = client.refine_on(1, x, &[], 10).unwrap();
    assert!(results.is_empty() && missing.is_empty());
}

#[test]
fn zero_k_returns_nothing() {
    let f = fixture(500, Metric::InnerProduct);
    let cluster = LocalCluster::start(f.dir.path(), 1, 1, ShardingKind::ById, batch()).unwrap();
    let got = cluster.client().unwrap().search(f.ds.get(0).1, &SearchConfig::new(0, 10, 4)).unwrap();
    assert!(got.results.is_empty());
}

#[test]
fn empty_index_and_malformed_requests() {
    let ds = gaussian_mixture(500, 16, 4, 2);
    let params = train_base_params(&ds, &build_config(Metric::InnerProduct)).unwrap();
    let worker = Arc::new(IndexWorker::new(FilterIndex::new(params, Metric::InnerProduct), batch()));
    let server = serve_index(worker, "127.0.0.1:0").unwrap();
    let cfg = ClusterConfig {
        index_workers: vec![server.addr().to_string()],
        refine_workers: vec!["127.0.0.1:1".into()],
        sharding: Sharding::ById,
    };
    let client = Client::new(cfg).unwrap();
    let got = client.filter_on(0, ds.get(0).1, &SearchConfig::new(10, 10, 32)).unwrap();
    assert!(got.candidates.is_empty());

    let err = client.filter_on(0, &[1.0; 15], &SearchConfig::new(10, 10, 32)).unwrap_err();
    assert!(matches!(err, NetError::Remote { status: 400, .. }), "{err}");
    let err = client.filter_on(0, ds.get(0).1, &SearchConfig::new(10, 10, 0)).unwrap_err();
    assert_eq!(err.status(), 400);

    let raw = ureq::post(&format!("http://{}/v1/filter", server.addr()))
        .config()
        .http_status_as_error(false)
        .build()
        .send("not json")
        .unwrap();
    assert_eq!(raw.status().as_u16(), 400);
    let body: serde_json::Value = raw.into_body().read_json().unwrap();
    assert_eq!(body["status"], "error");
    assert_eq!(body["error"]["code"], "bad_request");
}

#[test]
fn worker_without_index_is_not_ready() {
    let server = serve_index(Arc::new(IndexWorker::empty(batch())), "127.0.0.1:0").unwrap();
    let cfg = ClusterConfig {
        index_workers: vec![server.addr().to_string()],
        refine_workers: vec!["127.0.0.1:1".into()],
        sharding: Sharding::ById,
    };
    let client = Client::new(cfg).unwrap();
    assert!(!client.index_stats(0, false).unwrap().ready);
    let err = client.filter_on(0, &[0.0; 4], &SearchConfig::default()).unwrap_err();
    assert_eq!(err.status(), 503);
}

#[test]
fn unreachable_replica_is_retried() {
    let f = fixture(800, Metric::InnerProduct);
    let cluster = LocalCluster::start(f.dir.path(), 1, 1, ShardingKind::ById, batch()).unwrap();
    let mut cfg = cluster.config.clone();
    // a port nothing listens on, tried first
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string();
    cfg.index_workers.insert(0, dead);
    let client = Client::new(cfg).unwrap();
    let search = SearchConfig::new(5, 10, 8);
    for _ in 0..4 {
        let got = client.search(f.ds.get(1).1, &search).unwrap();
        assert_eq!(got.results, f.index.search(f.ds.get(1).1, &search).unwrap().results);
        assert_eq!(got.index_worker, 1);
    }
}
