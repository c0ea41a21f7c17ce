use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sieve_core::index::{BuildConfig, Index, SearchConfig};
use sieve_core::ivf::rank_partitions;
use sieve_core::pq::{adc_score, compute_lut};
use sieve_core::vector::normalize;
use sieve_core::{Dataset, Matrix, Metric};

fn mixture(n: usize, d: usize, clusters: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let centers: Vec<Vec<f32>> = (0..clusters).map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect()).collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..clusters)];
            normalize(&c.iter().map(|v| v + 0.5 * normal.sample(&mut rng)).collect::<Vec<_>>()).unwrap()
        })
        .collect();
    Dataset::with_sequential_ids(Matrix::from_rows(&rows).unwrap()).unwrap()
}

/// Filter stage recomputed with plain loops: rank every centroid, score
/// every stored code one at a time, sort everything.
fn scalar_filter(idx: &Index, x: &[f32], cfg: &SearchConfig) -> Vec<(u64, f32)> {
    let p = idx.search_params();
    let metric = idx.metric();
    let x_r = p.transform.apply(x).unwrap();
    let lut = compute_lut(&p.pq, &x_r, metric).unwrap();
    let ranked = rank_partitions(&x_r, &p.ivf, metric, cfg.use_q8).unwrap();
    let parts = idx.filter_index().partitions();
    let mut all = Vec::new();
    for &(pid, _) in ranked.iter().take(cfg.nprobe) {
        for (id, code) in parts.partition(pid).unwrap().entries() {
            if !parts.is_deleted(id) {
                all.push((id, adc_score(&lut, &code).unwrap()));
            }
        }
    }
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(cfg.k_prime());
    all
}

fn brute_force(ds: &Dataset, x: &[f32], k: usize, metric: Metric) -> Vec<u64> {
    let mut all: Vec<(u64, f32)> = ds.iter().map(|(id, v)| (id, metric.score(x, v))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|p| p.0).collect()
}

fn big_index() -> (Dataset, Index) {
    let ds = mixture(10_000, 32, 64, 1);
    let mut cfg = BuildConfig::new(256, 16, 8);
    cfg.opq_iters = 2;
    cfg.train_sample = 10_000;
    (ds.clone(), Index::build_base(&ds, &cfg).unwrap())
}

#[test]
fn filter_stage_equals_scalar_pipeline() {
    let (ds, idx) = big_index();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for use_q8 in [false, true] {
        let cfg = SearchConfig { use_q8, ..SearchConfig::new(10, 10, 32) };
        for _ in 0..50 {
            let x = ds.get(rng.random_range(0..ds.len())).1;
            let got = idx.filter_stage(x, &cfg).unwrap();
            assert_eq!(got.candidates, scalar_filter(&idx, x, &cfg));
            assert_eq!(got.partitions_scanned, 32);
        }
    }
}

#[test]
fn recall_equals_scalar_reference() {
    let (ds, idx) = big_index();
    let cfg = SearchConfig::new(10, 1000, 256 / 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut hits_idx, mut hits_ref) = (0, 0);
    for _ in 0..100 {
        let x = ds.get(rng.random_range(0..ds.len())).1.to_vec();
        let truth: HashSet<u64> = brute_force(&ds, &x, 10, Metric::InnerProduct).into_iter().collect();
        let got = idx.search(&x, &cfg).unwrap();
        hits_idx += got.results.iter().filter(|r| truth.contains(&r.0)).count();
        let cands: Vec<u64> = scalar_filter(&idx, &x, &cfg).into_iter().map(|c| c.0).collect();
        let mut exact: Vec<(u64, f32)> =
            cands.iter().map(|&id| (id, Metric::InnerProduct.score(&x, ds.get(id as usize).1))).collect();
        exact.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        hits_ref += exact.iter().take(10).filter(|r| truth.contains(&r.0)).count();
    }
    assert_eq!(hits_idx, hits_ref);
}

#[test]
fn enlarging_candidates_keeps_found_neighbours() {
    let (ds, idx) = big_index();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let x = ds.get(rng.random_range(0..ds.len())).1;
        let truth: HashSet<u64> = brute_force(&ds, x, 10, Metric::InnerProduct).into_iter().collect();
        let small = idx.filter_stage(x, &SearchConfig::new(10, 5, 16)).unwrap();
        let large = idx.filter_stage(x, &SearchConfig::new(10, 20, 16)).unwrap();
        let large: HashSet<u64> = large.candidates.iter().map(|c| c.0).collect();
        for (id, _) in small.candidates {
            if truth.contains(&id) {
                assert!(large.contains(&id));
            }
        }
    }
}

#[test]
fn randomized_deletes_never_surface() {
    let ds = mixture(3000, 16, 20, 5);
    let mut cfg = BuildConfig::new(32, 8, 4);
    cfg.opq_iters = 1;
    let idx = Index::build_base(&ds, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut dead = HashSet::new();
    let full = SearchConfig::new(3000, 1, 32);
    for round in 0..5 {
        let batch: Vec<u64> = (0..200).map(|_| rng.random_range(0..3000)).collect();
        idx.delete_many(&batch);
        dead.extend(batch);
        for _ in 0..10 {
            let x = ds.get(rng.random_range(0..3000)).1;
            let got = idx.filter_stage(x, &full).unwrap();
            assert!(got.candidates.iter().all(|c| !dead.contains(&c.0)), "round {round}");
            assert_eq!(got.candidates.len(), 3000 - dead.len());
        }
    }
}

#[test]
fn inserts_are_visible_after_acknowledgement() {
    let ds = mixture(2000, 16, 10, 7);
    let mut cfg = BuildConfig::new(16, 8, 4);
    cfg.opq_iters = 1;
    let base = ds.select(&(0..1000).collect::<Vec<_>>());
    let idx = Index::build_base(&base, &cfg).unwrap();
    let full = SearchConfig::new(1, 2000, 16);
    std::thread::scope(|s| {
        for t in 0..4 {
            let (idx, ds) = (&idx, &ds);
            s.spawn(move || {
                for i in (1000 + t..2000).step_by(4) {
                    let (id, v) = ds.get(i);
                    idx.insert(id, v).unwrap();
                    let got = idx.search(v, &full).unwrap();
                    assert_eq!(got.results[0].0, id);
                }
            });
        }
    });
    assert_eq!(idx.len(), 2000);
}

#[test]
fn concurrent_search_insert_delete_finish() {
    let ds = mixture(3000, 16, 10, 9);
    let mut cfg = BuildConfig::new(16, 8, 4);
    cfg.opq_iters = 1;
    let base = ds.select(&(0..1000).collect::<Vec<_>>());
    let idx = Index::build_base(&base, &cfg).unwrap();
    let search = SearchConfig::new(10, 5, 8);
    std::thread::scope(|s| {
        for t in 0..8u64 {
            let (idx, ds, search) = (&idx, &ds, &search);
            s.spawn(move || {
                for i in 0..250u64 {
                    let j = (1000 + t * 250 + i) as usize;
                    match i % 3 {
                        0 => {
                            let (id, v) = ds.get(j);
                            idx.insert(id, v).unwrap();
                        }
                        1 => {
                            idx.delete_many(&[(t * 125 + i / 2) % 1000]);
                        }
                        _ => {
                            idx.search(ds.get(j).1, search).unwrap();
                        }
                    }
                }
            });
        }
    });
    let deleted = idx.filter_index().partitions().tombstones().len();
    assert_eq!(idx.len(), 1000 + 8 * 84 - deleted);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn lossless_limit_any_small_dataset(seed in any::<u64>(), n in 40usize..200, l2 in any::<bool>()) {
        let metric = if l2 { Metric::EuclideanSquared } else { Metric::InnerProduct };
        let ds = mixture(n, 8, 5, seed);
        let mut cfg = BuildConfig::new(4, 4, 2);
        cfg.opq_iters = 1;
        cfg.metric = metric;
        cfg.seed = seed;
        let idx = Index::build_base(&ds, &cfg).unwrap();
        let search = SearchConfig::new(5, n, 4);
        for i in (0..n).step_by(13) {
            let x = ds.get(i).1;
            let got: Vec<u64> = idx.search(x, &search).unwrap().results.into_iter().map(|r| r.0).collect();
            prop_assert_eq!(got, brute_force(&ds, x, 5, metric));
        }
    }
}
