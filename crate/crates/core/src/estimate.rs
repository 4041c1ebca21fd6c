//! One-call estimators for frequency estimation and randomized benchmarking,
//! plus the summary record shared with the command-line tool.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::model::{Experiment, FieldValue, Model, Outcome};
use crate::models::{BinomialModel, PrecessionModel, RandomizedBenchmarkingModel};
use crate::resample::ResamplerConfig;
use crate::rng::stream_from_seed;
use crate::smc::{ParticleFilter, Updater};

/// One row of binomial data: `counts` successes out of `n_shots` at a
/// setting `x` (evolution time or sequence length).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRow {
    pub counts: u64,
    pub x: f64,
    pub n_shots: u64,
}

/// Rows of `(counts, x, n_shots)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataRecord {
    pub rows: Vec<DataRow>,
}

impl DataRecord {
    /// Validates `0 ≤ counts ≤ n_shots` and `n_shots ≥ 1` (rows are
    /// reported 1-based).
    pub fn new(rows: Vec<DataRow>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.n_shots == 0 {
                return Err(Error::Ingestion { row: i + 1, detail: "n_shots = 0; at least one shot is required".into() });
            }
            if r.counts > r.n_shots {
                return Err(Error::Ingestion {
                    row: i + 1,
                    detail: format!("counts {} exceed n_shots {}", r.counts, r.n_shots),
                });
            }
            if !r.x.is_finite() {
                return Err(Error::Ingestion { row: i + 1, detail: format!("setting {} is not finite", r.x) });
            }
        }
        Ok(DataRecord { rows })
    }

    pub fn from_columns(counts: &[u64], xs: &[f64], n_shots: &[u64]) -> Result<Self> {
        if counts.len() != xs.len() || xs.len() != n_shots.len() {
            return Err(Error::config("data columns have different lengths"));
        }
        Self::new(
            counts
                .iter()
                .zip(xs)
                .zip(n_shots)
                .map(|((&c, &x), &n)| DataRow { counts: c, x, n_shots: n })
                .collect(),
        )
    }

    /// Experiments for a binomial chain sweeping `field`; integer fields
    /// are truncated.
    fn experiments(&self, field: &str, integer: bool) -> Vec<(Outcome, Experiment)> {
        self.rows
            .iter()
            .map(|r| {
                let v = if integer { FieldValue::Int(r.x.trunc() as i64) } else { FieldValue::Real(r.x) };
                let e = Experiment::new().with(field, v).with_int("n_meas", r.n_shots as i64);
                (r.counts as Outcome, e)
            })
            .collect()
    }
}

/// Marginal histogram of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub parameter: String,
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    /// Posterior density per bin (integrates to one).
    pub density: Vec<f64>,
}

/// Weighted marginal histograms over each parameter's particle range.
pub fn marginal_histograms(filter: &ParticleFilter, names: &[String], bins: usize) -> Vec<Histogram> {
    let locs = filter.locations();
    let w = filter.weights();
    (0..filter.n_modelparams())
        .map(|j| {
            let col = locs.column(j);
            let (lo, hi) = (col.min(), col.max());
            let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
            let mut mass = vec![0.0; bins];
            for (k, v) in col.iter().enumerate() {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                mass[b] += w[k];
            }
            Histogram {
                parameter: names.get(j).cloned().unwrap_or_else(|| format!("x{j}")),
                edges: (0..=bins).map(|i| lo + width * i as f64).collect(),
                density: mass.into_iter().map(|m| m / width).collect(),
            }
        })
        .collect()
}

/// Posterior summary after an updater loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub model: String,
    pub parameters: Vec<String>,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub n_data: usize,
    pub ess_trace: Vec<f64>,
    pub min_ess: f64,
    pub log_evidence: f64,
    pub n_resamples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub histograms: Vec<Histogram>,
}

impl EstimateSummary {
    pub fn from_updater(u: &Updater) -> Self {
        EstimateSummary {
            model: u.model().name(),
            parameters: u.model().modelparam_names(),
            mean: u.est_mean(),
            covariance: u.est_covariance().row_iter().map(|r| r.iter().copied().collect()).collect(),
            n_data: u.data_count(),
            ess_trace: u.ess_trace().to_vec(),
            min_ess: u.min_ess_observed(),
            log_evidence: u.log_evidence(),
            n_resamples: u.n_resamples(),
            histograms: Vec::new(),
        }
    }

    pub fn with_histograms(mut self, u: &Updater, bins: usize) -> Self {
        if bins > 0 {
            self.histograms = marginal_histograms(u.filter(), &u.model().modelparam_names(), bins);
        }
        self
    }

    pub fn std_dev(&self, i: usize) -> f64 {
        self.covariance[i][i].sqrt()
    }

    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        self.covariance[i][j] / (self.std_dev(i) * self.std_dev(j))
    }
}

fn run(model: Arc<dyn Model>, prior: &Distribution, n_particles: usize, data: Vec<(Outcome, Experiment)>, seed: u64) -> Result<Updater> {
    let mut u = Updater::new(model, n_particles, prior, ResamplerConfig::default(), stream_from_seed(seed))?;
    for (d, e) in &data {
        u.update(*d, e)?;
    }
    Ok(u)
}

/// Frequency estimation: binomial-wrapped precession over `data` rows
/// `(counts, t, n_shots)` with a uniform prior on `omega_bounds`.
pub fn simple_est_prec(data: &DataRecord, n_particles: usize, omega_bounds: [f64; 2], seed: u64) -> Result<EstimateSummary> {
    let base = PrecessionModel::with_bounds(omega_bounds[0], omega_bounds[1])?;
    let model: Arc<dyn Model> = Arc::new(BinomialModel::new(Arc::new(base)));
    let prior = Distribution::uniform(vec![omega_bounds])?;
    let u = run(model, &prior, n_particles, data.experiments("t", false), seed)?;
    Ok(EstimateSummary::from_updater(&u))
}

/// Prior for the RB estimator: `p` uniform on `[p_min, p_max]`; `(A, B)`
/// uniform on `[0, 1]²`, restricted to `A + B ≤ 1` by the model's validity
/// rejection at initialization.
pub fn rb_prior(p_min: f64, p_max: f64) -> Result<Distribution> {
    if !(0.0 <= p_min && p_min < p_max && p_max <= 1.0) {
        return Err(Error::config(format!("need 0 ≤ p_min < p_max ≤ 1, got p_min = {p_min}, p_max = {p_max}")));
    }
    Distribution::uniform(vec![[p_min, p_max], [0.0, 1.0], [0.0, 1.0]])
}

/// Randomized benchmarking: binomial-wrapped `A·p^m + B` over rows
/// `(counts, m, n_shots)`; parameters are `(p, A, B)`.
pub fn simple_est_rb(data: &DataRecord, n_particles: usize, p_min: f64, p_max: f64, seed: u64) -> Result<EstimateSummary> {
    let prior = rb_prior(p_min, p_max)?;
    let model: Arc<dyn Model> = Arc::new(BinomialModel::new(Arc::new(RandomizedBenchmarkingModel::default())));
    let u = run(model, &prior, n_particles, data.experiments("m", true), seed)?;
    Ok(EstimateSummary::from_updater(&u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_validation() {
        let bad = DataRecord::from_columns(&[3, 30], &[1.0, 2.0], &[25, 25]);
        assert!(matches!(bad, Err(Error::Ingestion { row: 2, .. })));
        let zero = DataRecord::from_columns(&[0], &[1.0], &[0]);
        assert!(matches!(zero, Err(Error::Ingestion { row: 1, .. })));
    }

    #[test]
    fn empty_data_returns_prior_moments() {
        let s = simple_est_prec(&DataRecord::default(), 4000, [0.0, 1.0], 1).unwrap();
        assert_eq!(s.n_data, 0);
        assert_eq!(s.log_evidence, 0.0);
        assert!((s.mean[0] - 0.5).abs() < 0.02);
        assert!((s.covariance[0][0] - 1.0 / 12.0).abs() < 0.005);
    }

    #[test]
    fn rb_prior_bounds_checked() {
        assert!(matches!(simple_est_rb(&DataRecord::default(), 100, 0.9, 0.8, 0), Err(Error::Config(_))));
        assert!(matches!(rb_prior(0.8, 0.8), Err(Error::Config(_))));
    }

    #[test]
    fn rb_prior_fills_the_triangle() {
        let s = simple_est_rb(&DataRecord::default(), 20_000, 0.8, 1.0, 2).unwrap();
        // uniform on the triangle A, B ≥ 0, A + B ≤ 1: E[A] = 1/3, Var[A] = 1/18
        assert!((s.mean[1] - 1.0 / 3.0).abs() < 0.01);
        assert!((s.covariance[1][1] - 1.0 / 18.0).abs() < 0.003);
    }

    #[test]
    fn deterministic_given_seed() {
        let data = DataRecord::from_columns(&[20, 5, 12], &[1.0, 3.0, 7.0], &[25, 25, 25]).unwrap();
        let a = simple_est_prec(&data, 500, [0.0, 1.0], 9).unwrap();
        let b = simple_est_prec(&data, 500, [0.0, 1.0], 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn histograms_integrate_to_one() {
        let data = DataRecord::from_columns(&[20, 5], &[1.0, 3.0], &[25, 25]).unwrap();
        let model: Arc<dyn Model> = Arc::new(BinomialModel::new(Arc::new(PrecessionModel::new())));
        let prior = Distribution::uniform(vec![[0.0, 1.0]]).unwrap();
        let u = run(model, &prior, 1000, data.experiments("t", false), 3).unwrap();
        let h = &marginal_histograms(u.filter(), &["omega".into()], 20)[0];
        let total: f64 = h.density.iter().zip(h.edges.windows(2)).map(|(d, e)| d * (e[1] - e[0])).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
