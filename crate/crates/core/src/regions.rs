//! Posterior region estimates: weight-ranked credible particle sets, their
//! convex hulls, minimum-volume enclosing ellipsoids (MVEE) and covariance
//! ellipsoids.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{affine_rank, spd_inverse, stable_sum, symmetrize};
use crate::smc::ParticleFilter;

/// Hulls are built only up to this dimension.
pub const MAX_HULL_DIM: usize = 8;

pub const DEFAULT_MVEE_TOL: f64 = 1e-6;
pub const MVEE_MAX_ITER: usize = 100_000;

/// Slack applied to the cumulative-weight comparison so that `n` equal
/// weights reach `k/n` after exactly `k` particles despite rounding.
const CUMULATIVE_SLACK: f64 = 1e-12;

/// Indices of the smallest weight-ranked prefix whose total weight is at
/// least `alpha`. Ranking is by weight descending, ties by index ascending;
/// zero-weight particles are never included.
pub fn credible_set(filter: &ParticleFilter, alpha: f64) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::config(format!("credibility level {alpha} must lie in (0, 1]")));
    }
    let w = filter.weights();
    let mut order: Vec<usize> = (0..w.len()).filter(|&k| w[k] > 0.0).collect();
    order.sort_by(|&i, &j| w[j].total_cmp(&w[i]).then(i.cmp(&j)));
    let mut sum = 0.0;
    let mut comp = 0.0;
    let mut taken = order.len();
    for (rank, &k) in order.iter().enumerate() {
        let t = sum + w[k];
        comp += if sum.abs() >= w[k].abs() { (sum - t) + w[k] } else { (w[k] - t) + sum };
        sum = t;
        if sum + comp >= alpha - CUMULATIVE_SLACK {
            taken = rank + 1;
            break;
        }
    }
    order.truncate(taken);
    Ok(order)
}

/// A facet: `normal · x ≤ offset` on the inside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    /// Indices into the hull's vertex list.
    pub vertices: Vec<usize>,
    pub normal: Vec<f64>,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexHull {
    /// Vertex coordinates; counter-clockwise in two dimensions.
    pub vertices: Vec<Vec<f64>>,
    /// Row of each vertex in the source point set.
    pub vertex_indices: Vec<usize>,
    pub facets: Vec<Facet>,
}

impl ConvexHull {
    pub fn dim(&self) -> usize {
        self.vertices.first().map_or(0, Vec::len)
    }

    /// Largest signed facet violation `normal·x − offset` (≤ 0 inside).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.facets
            .iter()
            .map(|f| dot(&f.normal, x) - f.offset)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.max_violation(x) <= tol
    }

    /// Lebesgue measure: length, area or volume.
    pub fn volume(&self) -> f64 {
        let d = self.dim();
        if d == 0 || self.vertices.is_empty() {
            return 0.0;
        }
        let n = self.vertices.len() as f64;
        let origin: Vec<f64> = (0..d).map(|j| self.vertices.iter().map(|v| v[j]).sum::<f64>() / n).collect();
        let fact: f64 = (1..=d).map(|i| i as f64).product();
        let simplex = |f: &Facet| {
            let m = DMatrix::from_fn(d, d, |r, c| self.vertices[f.vertices[r]][c] - origin[c]);
            m.determinant().abs() / fact
        };
        stable_sum(self.facets.iter().map(simplex))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Convex hull of the rows of `points` (dimension 1 to [`MAX_HULL_DIM`]).
/// Points on or inside the boundary within round-off are not vertices.
pub fn convex_hull(points: &DMatrix<f64>) -> Result<ConvexHull> {
    let d = points.ncols();
    if d == 0 || d > MAX_HULL_DIM {
        return Err(Error::Unsupported(format!(
            "convex hulls are computed for 1 to {MAX_HULL_DIM} dimensions, not {d}; use the ellipsoid estimator"
        )));
    }
    let rank = affine_rank(points, 1e-10);
    if points.nrows() < d + 1 || rank < d {
        return Err(Error::Degenerate(format!(
            "{} points span an affine subspace of dimension {rank} < {d}; \
             fit an ellipsoid on the spanned subspace instead",
            points.nrows()
        )));
    }
    let hull = match d {
        1 => hull_1d(points),
        2 => hull_2d(points),
        _ => hull_nd(points)?,
    };
    Ok(hull)
}

fn hull_1d(points: &DMatrix<f64>) -> ConvexHull {
    let col = points.column(0);
    let lo = col.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0))).unwrap().0;
    let hi = col.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).unwrap().0;
    ConvexHull {
        vertices: vec![vec![col[lo]], vec![col[hi]]],
        vertex_indices: vec![lo, hi],
        facets: vec![
            Facet { vertices: vec![0], normal: vec![-1.0], offset: -col[lo] },
            Facet { vertices: vec![1], normal: vec![1.0], offset: col[hi] },
        ],
    }
}

/// Andrew's monotone chain; collinear boundary points are dropped.
fn hull_2d(points: &DMatrix<f64>) -> ConvexHull {
    let mut idx: Vec<usize> = (0..points.nrows()).collect();
    idx.sort_by(|&a, &b| {
        points[(a, 0)].total_cmp(&points[(b, 0)]).then(points[(a, 1)].total_cmp(&points[(b, 1)])).then(a.cmp(&b))
    });
    idx.dedup_by(|a, b| points[(*a, 0)] == points[(*b, 0)] && points[(*a, 1)] == points[(*b, 1)]);
    let cross = |o: usize, a: usize, b: usize| {
        (points[(a, 0)] - points[(o, 0)]) * (points[(b, 1)] - points[(o, 1)])
            - (points[(a, 1)] - points[(o, 1)]) * (points[(b, 0)] - points[(o, 0)])
    };
    let scale = points.amax().max(1.0);
    let eps = 1e-12 * scale * scale;
    let mut chain: Vec<usize> = Vec::with_capacity(2 * idx.len());
    for pass in 0..2 {
        let start = chain.len();
        let iter: Box<dyn Iterator<Item = &usize>> =
            if pass == 0 { Box::new(idx.iter()) } else { Box::new(idx.iter().rev()) };
        for &p in iter {
            while chain.len() >= start + 2 && cross(chain[chain.len() - 2], chain[chain.len() - 1], p) <= eps {
                chain.pop();
            }
            chain.push(p);
        }
        chain.pop();
    }
    let vertices: Vec<Vec<f64>> = chain.iter().map(|&k| vec![points[(k, 0)], points[(k, 1)]]).collect();
    let n = chain.len();
    let facets = (0..n)
        .map(|i| {
            let j = (i + 1) % n;
            let (a, b) = (&vertices[i], &vertices[j]);
            // outward normal of a counter-clockwise edge
            let (nx, ny) = (b[1] - a[1], a[0] - b[0]);
            let len = nx.hypot(ny);
            let normal = vec![nx / len, ny / len];
            let offset = dot(&normal, a);
            Facet { vertices: vec![i, j], normal, offset }
        })
        .collect();
    ConvexHull { vertices, vertex_indices: chain, facets }
}

struct WorkFacet {
    verts: Vec<usize>,
    normal: DVector<f64>,
    offset: f64,
}

fn row(points: &DMatrix<f64>, k: usize) -> DVector<f64> {
    points.row(k).transpose()
}

/// Hyperplane through `verts`, oriented so `interior` is strictly inside.
fn facet_through(points: &DMatrix<f64>, mut verts: Vec<usize>, interior: &DVector<f64>) -> Option<WorkFacet> {
    let d = points.ncols();
    let base = row(points, verts[0]);
    let edges = DMatrix::from_fn(d - 1, d, |r, c| points[(verts[r + 1], c)] - base[c]);
    // generalized cross product via signed cofactors
    let mut normal = DVector::from_fn(d, |j, _| {
        let minor = edges.clone().remove_column(j);
        let s = if j % 2 == 0 { 1.0 } else { -1.0 };
        s * minor.determinant()
    });
    let len = normal.norm();
    if !(len > 0.0) {
        return None;
    }
    normal /= len;
    let mut offset = normal.dot(&base);
    if normal.dot(interior) > offset {
        normal = -normal;
        offset = -offset;
    }
    verts.sort_unstable();
    Some(WorkFacet { verts, normal, offset })
}

/// Incremental beneath-beyond hull for three or more dimensions.
fn hull_nd(points: &DMatrix<f64>) -> Result<ConvexHull> {
    let (n, d) = (points.nrows(), points.ncols());
    let scale = points.amax().max(1.0);
    let eps = 1e-10 * scale;

    // initial simplex: greedily add the point farthest from the current span
    let first = (0..n).min_by(|&a, &b| points[(a, 0)].total_cmp(&points[(b, 0)])).unwrap();
    let mut simplex = vec![first];
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let origin = row(points, first);
    while simplex.len() < d + 1 {
        let mut best = (0.0, usize::MAX, DVector::zeros(d));
        for k in 0..n {
            let mut v = row(points, k) - &origin;
            for b in &basis {
                v -= b * b.dot(&v);
            }
            let dist = v.norm();
            if dist > best.0 {
                best = (dist, k, v);
            }
        }
        if best.0 <= eps {
            return Err(Error::Degenerate("credible points are affinely dependent; no full-dimensional hull".into()));
        }
        simplex.push(best.1);
        basis.push(best.2 / best.0);
    }
    let interior = simplex.iter().map(|&k| row(points, k)).sum::<DVector<f64>>() / (d + 1) as f64;

    let mut facets: Vec<WorkFacet> = Vec::new();
    for skip in 0..=d {
        let verts: Vec<usize> = simplex.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, &k)| k).collect();
        facets.push(facet_through(points, verts, &interior).expect("simplex facets are non-degenerate"));
    }

    // insert far points first so interior points are rejected early
    let mut order: Vec<usize> = (0..n).filter(|k| !simplex.contains(k)).collect();
    let dist: Vec<f64> = (0..n).map(|k| (row(points, k) - &interior).norm()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));

    for p in order {
        let x = row(points, p);
        let visible: Vec<usize> =
            (0..facets.len()).filter(|&f| facets[f].normal.dot(&x) - facets[f].offset > eps).collect();
        if visible.is_empty() {
            continue;
        }
        let mut ridges: HashMap<Vec<usize>, usize> = HashMap::new();
        for &f in &visible {
            let verts = &facets[f].verts;
            for skip in 0..verts.len() {
                let ridge: Vec<usize> =
                    verts.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, &v)| v).collect();
                *ridges.entry(ridge).or_insert(0) += 1;
            }
        }
        let mut horizon: Vec<Vec<usize>> =
            ridges.into_iter().filter(|(_, count)| *count == 1).map(|(r, _)| r).collect();
        horizon.sort();
        let mut keep = vec![true; facets.len()];
        for &f in &visible {
            keep[f] = false;
        }
        let mut next: Vec<WorkFacet> =
            facets.into_iter().zip(keep).filter(|(_, k)| *k).map(|(f, _)| f).collect();
        for mut ridge in horizon {
            ridge.push(p);
            if let Some(f) = facet_through(points, ridge, &interior) {
                next.push(f);
            }
        }
        facets = next;
    }

    let mut vertex_indices: Vec<usize> = facets.iter().flat_map(|f| f.verts.iter().copied()).collect();
    vertex_indices.sort_unstable();
    vertex_indices.dedup();
    let slot: HashMap<usize, usize> = vertex_indices.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    Ok(ConvexHull {
        vertices: vertex_indices.iter().map(|&k| points.row(k).iter().copied().collect()).collect(),
        facets: facets
            .into_iter()
            .map(|f| Facet {
                vertices: f.verts.iter().map(|k| slot[k]).collect(),
                normal: f.normal.iter().copied().collect(),
                offset: f.offset,
            })
            .collect(),
        vertex_indices,
    })
}

/// `{x : (x − c)ᵀ A (x − c) ≤ 1}` with `A` symmetric positive definite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vec<f64>,
    /// Shape matrix `A`, row by row.
    pub shape: Vec<Vec<f64>>,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Self {
        Ellipsoid {
            center: center.iter().copied().collect(),
            shape: shape.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn shape_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.shape[i][j])
    }

    /// `(x − c)ᵀ A (x − c)`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_iterator(self.dim(), x.iter().zip(&self.center).map(|(a, b)| a - b));
        diff.dot(&(self.shape_matrix() * &diff))
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.quadratic_form(x) <= 1.0 + tol
    }

    /// Semi-axis lengths `λ_i^{-1/2}`, ascending.
    pub fn semi_axes(&self) -> Vec<f64> {
        let mut axes: Vec<f64> = self.shape_matrix().symmetric_eigen().eigenvalues.iter().map(|l| 1.0 / l.sqrt()).collect();
        axes.sort_by(f64::total_cmp);
        axes
    }

    pub fn volume(&self) -> f64 {
        let d = self.dim() as f64;
        let unit_ball = std::f64::consts::PI.powf(d / 2.0) / statrs::function::gamma::gamma(d / 2.0 + 1.0);
        unit_ball / self.shape_matrix().determinant().sqrt()
    }
}

/// Minimum-volume enclosing ellipsoid of the rows of `points` by Khachiyan's
/// algorithm with Todd–Yıldırım away steps, stopped once every lifted point
/// satisfies `M_i ≤ (1 + tol)(d + 1)`. The result is rescaled so that every
/// point lies inside exactly.
pub fn mvee(points: &DMatrix<f64>, tol: f64) -> Result<Ellipsoid> {
    let (m, d) = (points.nrows(), points.ncols());
    if !(tol > 0.0) {
        return Err(Error::config(format!("MVEE tolerance {tol} must be positive")));
    }
    if m < d + 1 || affine_rank(points, 1e-10) < d {
        return Err(Error::Degenerate(
            "points are affinely dependent; the enclosing ellipsoid is flat. Fit on the spanned subspace instead".into(),
        ));
    }
    let q = DMatrix::from_fn(d + 1, m, |i, j| if i < d { points[(j, i)] } else { 1.0 });
    let mut u = DVector::from_element(m, 1.0 / m as f64);
    let target = (d + 1) as f64;
    let mut iterations = 0;
    loop {
        let x = &q * DMatrix::from_diagonal(&u) * q.transpose();
        let xinv = x
            .cholesky()
            .ok_or_else(|| Error::Degenerate("MVEE moment matrix lost positive definiteness".into()))?
            .inverse();
        let mvals: Vec<f64> = (0..m).map(|i| {
            let qi = q.column(i);
            qi.dot(&(&xinv * qi))
        }).collect();
        let (j, kappa) = mvals.iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        let residual = kappa / target - 1.0;
        if residual <= tol {
            break;
        }
        if iterations >= MVEE_MAX_ITER {
            return Err(Error::Convergence { iterations, residual });
        }
        iterations += 1;
        let (i, mu) = mvals
            .iter()
            .copied()
            .enumerate()
            .filter(|(k, _)| u[*k] > 0.0)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let away_gap = 1.0 - mu / target;
        if residual >= away_gap || mu <= 1.0 {
            let beta = (kappa - target) / (target * (kappa - 1.0));
            u *= 1.0 - beta;
            u[j] += beta;
        } else {
            let beta = ((target - mu) / (target * (mu - 1.0))).min(u[i] / (1.0 - u[i]));
            u *= 1.0 + beta;
            u[i] -= beta;
            if u[i] < 0.0 {
                u[i] = 0.0;
            }
        }
    }
    let p = points.transpose();
    let c = &p * &u;
    let mut scatter = &p * DMatrix::from_diagonal(&u) * points - &c * c.transpose();
    symmetrize(&mut scatter);
    let mut a = spd_inverse(&scatter)
        .map_err(|_| Error::Degenerate("enclosing ellipsoid scatter matrix is singular".into()))?
        / d as f64;
    let worst = (0..m)
        .map(|k| {
            let diff = points.row(k).transpose() - &c;
            diff.dot(&(&a * &diff))
        })
        .fold(0.0, f64::max);
    if worst > 1.0 {
        a /= worst;
    }
    symmetrize(&mut a);
    Ok(Ellipsoid::new(c, a))
}

/// Convex hull of the `alpha` credible particles.
pub fn region_est_hull(filter: &ParticleFilter, alpha: f64) -> Result<ConvexHull> {
    let idx = credible_set(filter, alpha)?;
    let pts = select_rows(filter.locations(), &idx);
    let mut hull = convex_hull(&pts)?;
    for v in hull.vertex_indices.iter_mut() {
        *v = idx[*v];
    }
    Ok(hull)
}

/// MVEE of the `alpha` credible particles, computed from their hull vertices
/// when a hull is available.
pub fn region_est_ellipsoid(filter: &ParticleFilter, alpha: f64, tol: f64) -> Result<Ellipsoid> {
    let idx = credible_set(filter, alpha)?;
    let pts = select_rows(filter.locations(), &idx);
    if filter.n_modelparams() <= MAX_HULL_DIM {
        let hull = convex_hull(&pts)?;
        let verts = DMatrix::from_fn(hull.vertices.len(), filter.n_modelparams(), |r, c| hull.vertices[r][c]);
        mvee(&verts, tol)
    } else {
        mvee(&pts, tol)
    }
}

/// `{x : (x − μ)ᵀ Cov⁻¹ (x − μ) ≤ scale²}` about the filter's mean.
pub fn covariance_ellipsoid(filter: &ParticleFilter, scale: f64) -> Result<Ellipsoid> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::config(format!("ellipsoid scale {scale} must be positive")));
    }
    let inv = spd_inverse(&filter.covariance()).map_err(|dir| {
        Error::Degenerate(format!("posterior covariance is singular along {dir:?}; no covariance ellipsoid"))
    })?;
    Ok(Ellipsoid::new(filter.mean(), inv / (scale * scale)))
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Serializable region record for CLI output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum RegionEstimate {
    ParticleSet { alpha: f64, indices: Vec<usize> },
    ConvexHull {
        alpha: f64,
        #[serde(flatten)]
        hull: ConvexHull,
    },
    Ellipsoid {
        #[serde(skip_serializing_if = "Option::is_none", default)]
        alpha: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        scale: Option<f64>,
        #[serde(flatten)]
        ellipsoid: Ellipsoid,
    },
}
