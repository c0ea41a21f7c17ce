//! Seeded Gaussian-mixture datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sieve_core::vector::normalize_in_place;
use sieve_core::{Dataset, Matrix};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub clusters: usize,
    /// Per-coordinate standard deviation around a center. Centers are
    /// standard normal.
    pub cluster_std: f32,
    pub seed: u64,
    /// Scale every row to unit length.
    pub normalize: bool,
}

impl SynthConfig {
    pub fn new(n: usize, d: usize, clusters: usize, seed: u64) -> Self {
        Self { n, d, clusters, cluster_std: 0.5, seed, normalize: false }
    }
}

/// Cluster centers plus the noise level; sampling the model with
/// different seeds gives base vectors and queries from one distribution.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    centers: Matrix,
    std: f32,
    normalize: bool,
}

impl MixtureModel {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        if cfg.d == 0 || cfg.clusters == 0 {
            return Err(BenchError::InvalidArgument("need d > 0 and at least one cluster".into()));
        }
        if !(cfg.cluster_std >= 0.0 && cfg.cluster_std.is_finite()) {
            return Err(BenchError::InvalidArgument(format!("cluster_std {} is not a valid deviation", cfg.cluster_std)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let centers: Vec<f32> = (0..cfg.clusters * cfg.d).map(|_| normal.sample(&mut rng)).collect();
        let centers = Matrix::from_vec(cfg.clusters, cfg.d, centers)?;
        Ok(Self { centers, std: cfg.cluster_std, normalize: cfg.normalize })
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let c = self.centers.row(rng.random_range(0..self.centers.rows()));
            let row = out.row_mut(i);
            for (r, &cv) in row.iter_mut().zip(c) {
                *r = cv + self.std * normal.sample(&mut rng);
            }
            if self.normalize {
                normalize_in_place(row)?;
            }
        }
        Ok(out)
    }
}

/// `cfg.n` vectors with ids `0..n`.
pub fn gaussian_mixture(cfg: &SynthConfig) -> Result<Dataset> {
    let model = MixtureModel::new(cfg)?;
    Ok(Dataset::with_sequential_ids(model.sample(cfg.n, cfg.seed.wrapping_add(1))?)?)
}

/// Base dataset and `n_queries` held-out queries from the same mixture.
pub fn mixture_with_queries(cfg: &SynthConfig, n_queries: usize) -> Result<(Dataset, Matrix)> {
    let model = MixtureModel::new(cfg)?;
    let base = Dataset::with_sequential_ids(model.sample(cfg.n, cfg.seed.wrapping_add(1))?)?;
    let queries = model.sample(n_queries, cfg.seed.wrapping_add(2))?;
    Ok((base, queries))
}
