//! Prior and kernel distributions over model-parameter vectors.
//!
//! A [`Distribution`] is an immutable descriptor. Sampling takes an explicit
//! random stream; density and score are available where they have a closed
//! form.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Axis-aligned box with independent uniform marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformBox {
    bounds: Vec<[f64; 2]>,
}

/// Multivariate normal; the covariance may be singular (PSD) for sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateNormal {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    sqrt_cov: DMatrix<f64>,
    precision: Option<DMatrix<f64>>,
    log_det: Option<f64>,
}

/// Uniform distribution on a disk centered at the origin (the rebit prior).
#[derive(Clone, Debug, PartialEq)]
pub struct DiskUniform {
    radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistributionSpec", into = "DistributionSpec")]
pub enum Distribution {
    Uniform(UniformBox),
    Normal(MultivariateNormal),
    /// Independent factors occupying consecutive parameter slots.
    Product(Vec<Distribution>),
    Disk(DiskUniform),
}

/// Serialized form: a record tagged by `kind`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistributionSpec {
    #[serde(alias = "uniform-box")]
    Uniform { bounds: Vec<[f64; 2]> },
    #[serde(alias = "multivariate-normal")]
    Normal { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    Product { factors: Vec<DistributionSpec> },
    #[serde(alias = "discrete-disk-uniform", alias = "disk-uniform")]
    Disk { radius: f64 },
}

impl UniformBox {
    pub fn new(bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::config("uniform distribution needs at least one axis"));
        }
        for (i, [lo, hi]) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::config(format!(
                    "uniform axis {i}: lower bound {lo} must be finite and below upper bound {hi}"
                )));
            }
        }
        Ok(UniformBox { bounds })
    }

    pub fn bounds(&self) -> &[[f64; 2]] {
        &self.bounds
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.bounds).all(|(v, [lo, hi])| *v >= *lo && *v <= *hi)
    }

    fn on_boundary(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.bounds).any(|(v, [lo, hi])| *v == *lo || *v == *hi)
    }
}

impl MultivariateNormal {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::config(format!(
                "normal distribution: mean has length {d} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("normal distribution has non-finite entries"));
        }
        if !linalg::is_symmetric(&cov, 1e-12) {
            return Err(Error::config("normal covariance is not symmetric"));
        }
        let sqrt_cov = linalg::psd_sqrt(&cov)
            .ok_or_else(|| Error::config("normal covariance is not positive semi-definite"))?;
        let (precision, log_det) = match cov.clone().cholesky() {
            Some(ch) => {
                let log_det = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                (Some(ch.inverse()), Some(log_det))
            }
            None => (None, None),
        };
        Ok(MultivariateNormal { mean, cov, sqrt_cov, precision, log_det })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    fn sample_into(&self, out: &mut [f64], rng: &mut dyn RngCore) {
        let d = self.mean.len();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &self.mean + &self.sqrt_cov * z;
        out.copy_from_slice(x.as_slice());
    }

    fn singular(&self) -> Error {
        Error::Unsupported("normal distribution with singular covariance has no density".into())
    }
}

impl DiskUniform {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::config(format!("disk radius must be positive, got {radius}")));
        }
        Ok(DiskUniform { radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

impl Distribution {
    pub fn uniform(bounds: Vec<[f64; 2]>) -> Result<Self> {
        UniformBox::new(bounds).map(Distribution::Uniform)
    }

    pub fn normal(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        MultivariateNormal::new(DVector::from_vec(mean), cov).map(Distribution::Normal)
    }

    /// Scalar normal with the given variance.
    pub fn normal_1d(mean: f64, variance: f64) -> Result<Self> {
        Self::normal(vec![mean], DMatrix::from_element(1, 1, variance))
    }

    pub fn disk(radius: f64) -> Result<Self> {
        DiskUniform::new(radius).map(Distribution::Disk)
    }

    pub fn product(factors: Vec<Distribution>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::config("product distribution needs at least one factor"));
        }
        Ok(Distribution::Product(factors))
    }

    /// Number of model parameters this distribution ranges over.
    pub fn dim(&self) -> usize {
        match self {
            Distribution::Uniform(u) => u.bounds.len(),
            Distribution::Normal(n) => n.mean.len(),
            Distribution::Product(fs) => fs.iter().map(Distribution::dim).sum(),
            Distribution::Disk(_) => 2,
        }
    }

    /// Draws `n` independent rows. Rows are generated in order, so the output
    /// is a pure function of the stream state.
    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        let mut row = vec![0.0; d];
        for i in 0..n {
            self.sample_one(&mut row, rng);
            for (j, v) in row.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        Ok(out)
    }

    /// Writes one draw into `out`, which must have length [`Self::dim`].
    pub fn sample_one(&self, out: &mut [f64], rng: &mut dyn RngCore) {
        match self {
            Distribution::Uniform(u) => {
                for (v, [lo, hi]) in out.iter_mut().zip(&u.bounds) {
                    *v = lo + (hi - lo) * rng.random::<f64>();
                }
            }
            Distribution::Normal(n) => n.sample_into(out, rng),
            Distribution::Product(fs) => {
                let mut offset = 0;
                for f in fs {
                    let k = f.dim();
                    f.sample_one(&mut out[offset..offset + k], rng);
                    offset += k;
                }
            }
            Distribution::Disk(disk) => {
                let r = disk.radius * rng.random::<f64>().sqrt();
                let theta = std::f64::consts::TAU * rng.random::<f64>();
                out[0] = r * theta.cos();
                out[1] = r * theta.sin();
            }
        }
    }

    /// Natural-log density. Points outside a bounded support give `-inf`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        match self {
            Distribution::Uniform(u) => {
                if u.contains(x) {
                    Ok(-u.bounds.iter().map(|[lo, hi]| (hi - lo).ln()).sum::<f64>())
                } else {
                    Ok(f64::NEG_INFINITY)
                }
            }
            Distribution::Normal(n) => {
                let (prec, log_det) = match (&n.precision, n.log_det) {
                    (Some(p), Some(l)) => (p, l),
                    _ => return Err(n.singular()),
                };
                let diff = DVector::from_column_slice(x) - &n.mean;
                let quad = diff.dot(&(prec * &diff));
                let d = x.len() as f64;
                Ok(-0.5 * (d * std::f64::consts::TAU.ln() + log_det + quad))
            }
            Distribution::Product(fs) => {
                let mut total = 0.0;
                let mut offset = 0;
                for f in fs {
                    let k = f.dim();
                    total += f.log_density(&x[offset..offset + k])?;
                    offset += k;
                }
                Ok(total)
            }
            Distribution::Disk(disk) => {
                if x[0] * x[0] + x[1] * x[1] <= disk.radius * disk.radius {
                    Ok(-(std::f64::consts::PI * disk.radius * disk.radius).ln())
                } else {
                    Ok(f64::NEG_INFINITY)
                }
            }
        }
    }

    /// Gradient of [`Self::log_density`]. Flat densities give a zero vector in
    /// the interior and are unsupported on or outside the boundary.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        match self {
            Distribution::Uniform(u) => {
                if u.contains(x) && !u.on_boundary(x) {
                    Ok(vec![0.0; x.len()])
                } else {
                    Err(Error::Unsupported(
                        "uniform density is not differentiable on or outside its boundary".into(),
                    ))
                }
            }
            Distribution::Normal(n) => {
                let prec = n.precision.as_ref().ok_or_else(|| n.singular())?;
                let diff = DVector::from_column_slice(x) - &n.mean;
                Ok((-(prec * diff)).as_slice().to_vec())
            }
            Distribution::Product(fs) => {
                let mut out = Vec::with_capacity(x.len());
                let mut offset = 0;
                for f in fs {
                    let k = f.dim();
                    out.extend(f.score(&x[offset..offset + k])?);
                    offset += k;
                }
                Ok(out)
            }
            Distribution::Disk(disk) => {
                if x[0] * x[0] + x[1] * x[1] < disk.radius * disk.radius {
                    Ok(vec![0.0; 2])
                } else {
                    Err(Error::Unsupported(
                        "disk density is not differentiable on or outside its boundary".into(),
                    ))
                }
            }
        }
    }

    /// Prior information matrix `E[score scoreᵀ]`, defined only for
    /// densities that vanish smoothly at the edge of their support.
    pub fn information(&self) -> Result<DMatrix<f64>> {
        match self {
            Distribution::Normal(n) => n.precision.clone().ok_or_else(|| n.singular()),
            Distribution::Product(fs) => {
                let d = self.dim();
                let mut out = DMatrix::zeros(d, d);
                let mut offset = 0;
                for f in fs {
                    let k = f.dim();
                    out.view_mut((offset, offset), (k, k)).copy_from(&f.information()?);
                    offset += k;
                }
                Ok(out)
            }
            Distribution::Uniform(_) | Distribution::Disk(_) => Err(Error::Unsupported(
                "prior has a discontinuous density; the van Trees bound does not apply, use the Cramér-Rao bound instead"
                    .into(),
            )),
        }
    }

    /// Analytic mean.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            Distribution::Uniform(u) => u.bounds.iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect(),
            Distribution::Normal(n) => n.mean.as_slice().to_vec(),
            Distribution::Product(fs) => fs.iter().flat_map(Distribution::mean).collect(),
            Distribution::Disk(_) => vec![0.0, 0.0],
        }
    }

    /// Analytic covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            Distribution::Uniform(u) => DMatrix::from_diagonal(&DVector::from_iterator(
                u.bounds.len(),
                u.bounds.iter().map(|[lo, hi]| (hi - lo).powi(2) / 12.0),
            )),
            Distribution::Normal(n) => n.cov.clone(),
            Distribution::Product(fs) => {
                let d = self.dim();
                let mut out = DMatrix::zeros(d, d);
                let mut offset = 0;
                for f in fs {
                    let k = f.dim();
                    out.view_mut((offset, offset), (k, k)).copy_from(&f.covariance());
                    offset += k;
                }
                out
            }
            Distribution::Disk(disk) => DMatrix::identity(2, 2) * (disk.radius * disk.radius / 4.0),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::config(format!(
                "point has {} coordinates, distribution has {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

impl TryFrom<DistributionSpec> for Distribution {
    type Error = Error;

    fn try_from(spec: DistributionSpec) -> Result<Self> {
        match spec {
            DistributionSpec::Uniform { bounds } => Distribution::uniform(bounds),
            DistributionSpec::Normal { mean, cov } => {
                let d = mean.len();
                if cov.len() != d || cov.iter().any(|r| r.len() != d) {
                    return Err(Error::config(format!("normal covariance must be {d}x{d}")));
                }
                let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
                Distribution::normal(mean, m)
            }
            DistributionSpec::Product { factors } => Distribution::product(
                factors.into_iter().map(Distribution::try_from).collect::<Result<_>>()?,
            ),
            DistributionSpec::Disk { radius } => Distribution::disk(radius),
        }
    }
}

impl From<Distribution> for DistributionSpec {
    fn from(d: Distribution) -> Self {
        match d {
            Distribution::Uniform(u) => DistributionSpec::Uniform { bounds: u.bounds },
            Distribution::Normal(n) => DistributionSpec::Normal {
                mean: n.mean.as_slice().to_vec(),
                cov: n.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
            },
            Distribution::Product(fs) => {
                DistributionSpec::Product { factors: fs.into_iter().map(Into::into).collect() }
            }
            Distribution::Disk(disk) => DistributionSpec::Disk { radius: disk.radius },
        }
    }
}
