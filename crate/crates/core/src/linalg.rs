//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

/// Relative eigenvalue floor below which a PSD matrix is treated as singular.
pub const SINGULAR_RTOL: f64 = 1e-10;

pub fn is_symmetric(m: &DMatrix<f64>, rtol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rtol * scale))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetric square root `S` with `S·S = m`, or `None` if `m` has an
/// eigenvalue below `-1e-10·max(1, λ_max)`. Slightly negative eigenvalues are
/// clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.max().max(0.0);
    if eig.eigenvalues.min() < -SINGULAR_RTOL * lmax.max(1.0) {
        return None;
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Some(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Inverse of a symmetric PSD matrix, or the unit eigenvector of its smallest
/// eigenvalue when that eigenvalue is below `SINGULAR_RTOL·λ_max`.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, Vec<f64>> {
    let eig = m.clone().symmetric_eigen();
    let (imin, lmin) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty matrix");
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) || lmin <= SINGULAR_RTOL * lmax {
        let mut dir: Vec<f64> = eig.eigenvectors.column(imin).iter().copied().collect();
        // sign convention: first nonzero component positive
        if let Some(first) = dir.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                dir.iter_mut().for_each(|v| *v = -*v);
            }
        }
        return Err(dir);
    }
    let inv = eig.eigenvalues.map(|l| 1.0 / l);
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&inv) * v.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Compensated (Neumaier) sum.
pub fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Weighted mean of the rows of `points`.
pub fn weighted_mean(weights: &[f64], points: &DMatrix<f64>) -> DVector<f64> {
    let d = points.ncols();
    DVector::from_fn(d, |j, _| stable_sum(weights.iter().enumerate().map(|(k, w)| w * points[(k, j)])))
}

/// Weighted covariance about `mean`, accumulated from shifted rows.
pub fn weighted_covariance(weights: &[f64], points: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let d = points.ncols();
    let mut cov = DMatrix::zeros(d, d);
    let mut diff = vec![0.0; d];
    for (k, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for j in 0..d {
            diff[j] = points[(k, j)] - mean[j];
        }
        for i in 0..d {
            for j in 0..=i {
                cov[(i, j)] += w * diff[i] * diff[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov
}

/// Numerical rank of the row set `points` after centering on their mean,
/// relative to the largest singular value.
pub fn affine_rank(points: &DMatrix<f64>, rtol: f64) -> usize {
    if points.nrows() < 2 {
        return 0;
    }
    let mean = points.row_mean();
    let mut centered = points.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let sv = centered.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rtol * smax).count()
}
