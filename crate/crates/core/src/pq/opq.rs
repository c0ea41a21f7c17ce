//! OPQ initialization of the reduction transform and its PQ codebook.
//!
//! The map is a PCA projection to `d_r` dimensions followed by a learned
//! `d_r x d_r` rotation. Each round refits the rotation by orthogonal
//! Procrustes against the current reconstructions and then continues
//! Lloyd iterations from the previous codebook, so the reconstruction
//! error cannot increase from one round to the next.

use nalgebra::{DMatrix, SymmetricEigen};

use super::{pq_refine, pq_train, reconstruction_error, subspace_width, PqCodebook};
use crate::error::{Error, Result};
use crate::vector::{Matrix, Transform};

/// Lloyd iterations per round when refitting the codebook.
const REFINE_ITERS: usize = 8;

#[derive(Debug, Clone)]
pub struct OpqOutput {
    pub transform: Transform,
    pub codebook: PqCodebook,
    /// Mean squared reconstruction error after the initial fit and after
    /// every accepted round.
    pub errors: Vec<f64>,
    /// The data had rank below `d_r`; the plain PCA map was kept.
    pub degenerate: bool,
}

pub fn opq_init(data: &Matrix, d_r: usize, m: usize, iters: usize, seed: u64) -> Result<OpqOutput> {
    let d = data.cols();
    if d_r == 0 || d_r > d {
        return Err(Error::InvalidArgument(format!(
            "reduced dimension {d_r} must be in 1..={d}"
        )));
    }
    subspace_width(d_r, m)?;
    if data.rows() == 0 {
        return Err(Error::InvalidArgument("need at least one training vector".into()));
    }
    if !data.is_finite() {
        return Err(Error::NonFinite);
    }

    let (pca, degenerate) = pca_basis(data, d_r);
    if degenerate {
        log::warn!("training data has rank below {d_r}; keeping the PCA-truncated map without rotation");
    }
    // weights are stored d_r x d, i.e. the transpose of the d x d_r basis
    let pca_t = pca.transpose();
    let projected = to_transform(&pca_t)?.apply_batch(data)?;

    let mut transform = to_transform(&pca_t)?;
    let mut codebook = pq_train(&projected, m, seed)?;
    let mut err = reconstruction_error(&codebook, &projected);
    let mut errors = vec![err];

    let rounds = if degenerate { 0 } else { iters };
    let mut current = projected.clone();
    for round in 0..rounds {
        let recon = reconstruct(&codebook, &current);
        let rotation = procrustes(&projected, &recon);
        let weights = rotation.transpose() * &pca_t;
        let candidate = to_transform(&weights)?;
        let rotated = candidate.apply_batch(data)?;
        let cb = pq_refine(&rotated, &codebook, REFINE_ITERS)?;
        let e = reconstruction_error(&cb, &rotated);
        if e > err {
            log::debug!("opq round {round}: error rose from {err} to {e}, stopping");
            break;
        }
        transform = candidate;
        codebook = cb;
        current = rotated;
        err = e;
        errors.push(e);
    }

    Ok(OpqOutput { transform, codebook, errors, degenerate })
}

/// Top `d_r` eigenvectors of the uncentered second-moment matrix, as the
/// columns of a `d x d_r` matrix (identity when `d_r == d`).
fn pca_basis(data: &Matrix, d_r: usize) -> (DMatrix<f64>, bool) {
    let d = data.cols();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in data.iter_rows() {
        for i in 0..d {
            let xi = row[i] as f64;
            if xi == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += xi * row[j] as f64;
            }
        }
    }
    let n = data.rows() as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    // without reduction the input axes are kept as the starting basis, so the
    // first fit is exactly plain PQ
    let basis = if d_r == d {
        DMatrix::<f64>::identity(d, d)
    } else {
        let mut basis = DMatrix::<f64>::zeros(d, d_r);
        for (c, &k) in order.iter().take(d_r).enumerate() {
            basis.set_column(c, &eig.eigenvectors.column(k));
        }
        basis
    };
    let top = eig.eigenvalues[order[0]].max(0.0);
    let last = eig.eigenvalues[order[d_r - 1]];
    let degenerate = top == 0.0 || last <= top * 1e-10;
    (basis, degenerate)
}

/// Orthogonal `R` minimizing `|| z R - q ||_F`.
fn procrustes(z: &Matrix, q: &Matrix) -> DMatrix<f64> {
    let k = z.cols();
    let mut cross = DMatrix::<f64>::zeros(k, k);
    for (zr, qr) in z.iter_rows().zip(q.iter_rows()) {
        for i in 0..k {
            let zi = zr[i] as f64;
            for j in 0..k {
                cross[(i, j)] += zi * qr[j] as f64;
            }
        }
    }
    let svd = cross.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    u * v_t
}

fn reconstruct(cb: &PqCodebook, data: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(data.rows(), data.cols());
    for (i, row) in data.iter_rows().enumerate() {
        let code = cb.encode_unchecked(row);
        let dst = out.row_mut(i);
        for j in 0..cb.m() {
            dst[j * cb.dsub()..(j + 1) * cb.dsub()].copy_from_slice(cb.centroid(j, code.get(j) as usize));
        }
    }
    out
}

fn to_transform(weights: &DMatrix<f64>) -> Result<Transform> {
    let (rows, cols) = weights.shape();
    let mut w = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            w.row_mut(r)[c] = weights[(r, c)] as f32;
        }
    }
    Transform::new(w, vec![0.0; rows])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Independent coordinates: coordinate `i` takes `scales[i]` times a
    /// random level in {-1.5, -0.5, 0.5, 1.5} plus noise.
    fn axis_data(n: usize, scales: &[f32], seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let d = scales.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            for s in scales {
                let level = rng.random_range(0..4) as f32 - 1.5;
                out.push(s * (level + 0.3 * normal.sample(&mut rng)));
            }
        }
        Matrix::from_vec(n, d, out).unwrap()
    }

    /// Leading eigenvectors of the second-moment matrix by power iteration
    /// with deflation.
    fn power_iteration_basis(data: &Matrix, k: usize) -> Vec<Vec<f64>> {
        let d = data.cols();
        let mut m = vec![vec![0.0f64; d]; d];
        for row in data.iter_rows() {
            for i in 0..d {
                for j in 0..d {
                    m[i][j] += row[i] as f64 * row[j] as f64 / data.rows() as f64;
                }
            }
        }
        let mut out = Vec::new();
        for _ in 0..k {
            let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 0.01).collect();
            let mut lambda = 0.0;
            for _ in 0..5000 {
                let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| m[i][j] * v[j]).sum()).collect();
                lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                w.iter_mut().for_each(|x| *x /= lambda);
                v = w;
            }
            for i in 0..d {
                for j in 0..d {
                    m[i][j] -= lambda * v[i] * v[j];
                }
            }
            out.push(v);
        }
        out
    }

    #[test]
    fn zero_rounds_is_the_pca_map() {
        let scales = [5.0, 0.1, 3.0, 0.2, 1.0, 0.05];
        let data = axis_data(400, &scales, 1);
        let out = opq_init(&data, 3, 3, 0, 7).unwrap();
        assert_eq!(out.errors.len(), 1);
        assert!(out.transform.bias().iter().all(|&b| b == 0.0));
        let oracle = power_iteration_basis(&data, 3);
        let w = out.transform.weights();
        for (r, v) in oracle.iter().enumerate() {
            let cos: f64 = (0..6).map(|c| w.row(r)[c] as f64 * v[c]).sum();
            assert!(cos.abs() > 1.0 - 1e-5, "row {r}: |cos| = {}", cos.abs());
        }
        // codebook trained once on the projected data
        let projected = out.transform.apply_batch(&data).unwrap();
        let cb = pq_train(&projected, 3, 7).unwrap();
        assert_eq!(cb.as_slice(), out.codebook.as_slice());
    }

    #[test]
    fn reconstruction_error_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let (n, d) = (600, 12);
        let mix: Vec<f32> = (0..d * d).map(|_| normal.sample(&mut rng)).collect();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z: Vec<f32> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            for r in 0..d {
                data.push((0..d).map(|c| mix[r * d + c] * z[c]).sum());
            }
        }
        let data = Matrix::from_vec(n, d, data).unwrap();
        let out = opq_init(&data, 8, 4, 6, 3).unwrap();
        for w in out.errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{:?}", out.errors);
        }
        assert!(out.errors.last().unwrap() <= &out.errors[0]);
    }

    #[test]
    fn full_dimension_no_worse_than_plain_pq() {
        let scales = [4.0, 3.5, 3.0, 2.5, 2.0, 1.5, 1.0, 0.5];
        let data = axis_data(500, &scales, 2);
        let plain = pq_train(&data, 4, 11).unwrap();
        let plain_err = reconstruction_error(&plain, &data);
        let out = opq_init(&data, 8, 4, 5, 11).unwrap();
        assert!(out.errors.last().unwrap() <= &(plain_err + 1e-6), "{:?} vs {plain_err}", out.errors);
    }

    #[test]
    fn rank_deficient_data_falls_back() {
        let mut rows = Vec::new();
        for i in 0..64 {
            let t = i as f32 * 0.1;
            rows.push(vec![t, 2.0 * t, -t, 0.0]);
        }
        let data = Matrix::from_rows(&rows).unwrap();
        let out = opq_init(&data, 2, 1, 4, 0).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.errors.len(), 1);
    }

    #[test]
    fn argument_errors() {
        let data = axis_data(100, &[1.0, 2.0, 3.0, 4.0], 3);
        assert!(opq_init(&data, 5, 1, 1, 0).is_err());
        assert!(opq_init(&data, 3, 2, 1, 0).is_err());
        assert!(opq_init(&Matrix::zeros(0, 4), 2, 1, 1, 0).is_err());
    }
}
