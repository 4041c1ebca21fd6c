//! Decorator models forming model chains.
//!
//! Each decorator wraps an underlying [`Model`] and defines its likelihood in
//! terms of the underlying one. Chains are built bottom-up and are therefore
//! finite and acyclic.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Binomial, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    copy_row, pr0_to_likelihoods, Experiment, FieldKind, FieldSpec, FieldValue, Likelihoods, Model, Outcome,
};
use crate::rng::{mix64, RandomStream};

fn require_two_outcome(model: &dyn Model, experiments: &[Experiment], role: &str) -> Result<()> {
    for e in experiments {
        let n = model.n_outcomes(e)?;
        if n != 2 {
            return Err(Error::config(format!(
                "{role} requires a two-outcome underlying model, but {} has {n} outcomes",
                model.name()
            )));
        }
    }
    Ok(())
}

/// `x·ln(y)` with the convention `0·ln(0) = 0`.
#[inline]
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Binomial log-pmf `ln[C(n,k) q^k (1−q)^(n−k)]`, evaluated in log space so
/// shot counts in the millions stay finite.
/// `ln C(n, k)`. Exact products up to n = 1000, log-gamma beyond.
pub fn ln_binomial_coefficient(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    if n <= 1000 {
        let mut c = 1.0f64;
        for i in 1..=k {
            c = c * (n - k + i) as f64 / i as f64;
        }
        return c.ln();
    }
    let (nf, kf) = (n as f64, k as f64);
    ln_gamma(nf + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0)
}

pub fn binomial_log_pmf(k: u64, n: u64, q: f64, one_minus_q: f64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let (kf, nf) = (k as f64, n as f64);
    ln_binomial_coefficient(n, k) + xlogy(kf, q) + xlogy(nf - kf, one_minus_q)
}

/// Repeats a two-outcome coin `n_meas` times and reports how many times
/// outcome 0 occurred.
#[derive(Debug, Clone)]
pub struct BinomialModel {
    underlying: Arc<dyn Model>,
}

impl BinomialModel {
    pub fn new(underlying: Arc<dyn Model>) -> Self {
        BinomialModel { underlying }
    }

    fn n_meas(e: &Experiment) -> Result<u64> {
        let n = e.int("n_meas")?;
        if n < 1 {
            return Err(Error::config(format!("n_meas must be at least 1, got {n}")));
        }
        Ok(n as u64)
    }
}

impl Model for BinomialModel {
    fn name(&self) -> String {
        format!("binomial({})", self.underlying.name())
    }

    fn n_modelparams(&self) -> usize {
        self.underlying.n_modelparams()
    }

    fn modelparam_names(&self) -> Vec<String> {
        self.underlying.modelparam_names()
    }

    fn expparams_fields(&self) -> Vec<FieldSpec> {
        let mut f = self.underlying.expparams_fields();
        f.push(FieldSpec::new("n_meas", FieldKind::Int));
        f
    }

    fn n_outcomes(&self, e: &Experiment) -> Result<usize> {
        Ok(Self::n_meas(e)? as usize + 1)
    }

    fn is_valid(&self, x: &[f64]) -> bool {
        self.underlying.is_valid(x)
    }

    fn clip_to_valid(&self, x: &mut [f64]) {
        self.underlying.clip_to_valid(x)
    }

    fn likelihood_unchecked(
        &self,
        outcomes: &[Outcome],
        params: &DMatrix<f64>,
        experiments: &[Experiment],
    ) -> Result<Likelihoods> {
        require_two_outcome(self.underlying.as_ref(), experiments, "binomial model")?;
        let n_meas = experiments.iter().map(Self::n_meas).collect::<Result<Vec<_>>>()?;
        let base = self.underlying.likelihood_unchecked(&[0, 1], params, experiments)?;
        let np = params.nrows();
        let mut out = Likelihoods::zeros(outcomes.len(), np, experiments.len());
        for (k, &n) in n_meas.iter().enumerate() {
            for (i, &c) in outcomes.iter().enumerate() {
                let c = c as u64;
                if c > n {
                    continue;
                }
                if n == 1 {
                    // a single flip is the underlying coin itself
                    for j in 0..np {
                        out.set(i, j, k, base.get(c as usize, j, k));
                    }
                    continue;
                }
                let (nf, cf) = (n as f64, c as f64);
                let log_coeff = ln_binomial_coefficient(n, c);
                for j in 0..np {
                    let q = base.get(0, j, k);
                    let r = base.get(1, j, k);
                    let v = (log_coeff + xlogy(cf, q) + xlogy(nf - cf, r)).exp();
                    out.set(i, j, k, v.min(1.0));
                }
            }
        }
        Ok(out)
    }

    fn simulate_experiment(&self, true_params: &[f64], e: &Experiment, rng: &mut dyn RngCore) -> Result<Outcome> {
        let n = Self::n_meas(e)?;
        require_two_outcome(self.underlying.as_ref(), std::slice::from_ref(e), "binomial model")?;
        let params = DMatrix::from_row_slice(1, true_params.len(), true_params);
        let q = self.underlying.likelihood(&[0], &params, std::slice::from_ref(e))?.get(0, 0, 0);
        let dist = Binomial::new(n, q).map_err(|err| Error::NumericDomain(err.to_string()))?;
        Ok(rng.sample(dist) as Outcome)
    }

    fn has_timestep(&self) -> bool {
        self.underlying.has_timestep()
    }

    fn update_timestep(&self, params: &DMatrix<f64>, e: &Experiment, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        self.underlying.update_timestep(params, e, rng)
    }

    fn underlying(&self) -> Option<&dyn Model> {
        Some(self.underlying.as_ref())
    }
}

/// Raises the underlying likelihood to a power `γ`. `γ > 1` sharpens the
/// posterior toward the maximum-likelihood point; `γ < 1` anneals.
///
/// The tempered values are not renormalized over outcomes; they are only
/// meaningful inside a weight update, where normalization is implicit.
#[derive(Debug, Clone)]
pub struct TemperedModel {
    underlying: Arc<dyn Model>,
    gamma: f64,
}

impl TemperedModel {
    pub fn new(underlying: Arc<dyn Model>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!("tempering exponent must be positive, got {gamma}")));
        }
        Ok(TemperedModel { underlying, gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Model for TemperedModel {
    fn name(&self) -> String {
        format!("tempered({})", self.underlying.name())
    }

    fn n_modelparams(&self) -> usize {
        self.underlying.n_modelparams()
    }

    fn modelparam_names(&self) -> Vec<String> {
        self.underlying.modelparam_names()
    }

    fn expparams_fields(&self) -> Vec<FieldSpec> {
        self.underlying.expparams_fields()
    }

    fn n_outcomes(&self, e: &Experiment) -> Result<usize> {
        self.underlying.n_outcomes(e)
    }

    fn is_valid(&self, x: &[f64]) -> bool {
        self.underlying.is_valid(x)
    }

    fn clip_to_valid(&self, x: &mut [f64]) {
        self.underlying.clip_to_valid(x)
    }

    fn likelihood_unchecked(
        &self,
        outcomes: &[Outcome],
        params: &DMatrix<f64>,
        experiments: &[Experiment],
    ) -> Result<Likelihoods> {
        let mut l = self.underlying.likelihood_unchecked(outcomes, params, experiments)?;
        if self.gamma != 1.0 {
            for v in l.as_mut_slice() {
                *v = v.powf(self.gamma);
            }
        }
        Ok(l)
    }

    fn simulate_experiment(&self, true_params: &[f64], e: &Experiment, rng: &mut dyn RngCore) -> Result<Outcome> {
        self.underlying.simulate_experiment(true_params, e, rng)
    }

    fn has_timestep(&self) -> bool {
        self.underlying.has_timestep()
    }

    fn update_timestep(&self, params: &DMatrix<f64>, e: &Experiment, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        self.underlying.update_timestep(params, e, rng)
    }

    fn underlying(&self) -> Option<&dyn Model> {
        Some(self.underlying.as_ref())
    }
}

/// Adds zero-mean normal noise of standard deviation `epsilon` to each entry
/// of `pr0`, then clips into `[0, 1]`.
pub fn perturb_pr0(pr0: &mut [f64], epsilon: f64, rng: &mut dyn RngCore) {
    if epsilon == 0.0 {
        return;
    }
    for p in pr0 {
        let z: f64 = rng.sample(StandardNormal);
        *p = (*p + epsilon * z).clamp(0.0, 1.0);
    }
}

/// A deliberately faulty two-outcome model: the underlying `Pr(0)` is
/// perturbed by clipped Gaussian noise of standard deviation `epsilon`.
///
/// The noise is a fixed pseudo-random function of `(seed, x, e)`, so the
/// likelihood stays a pure function and sharded evaluation agrees with serial
/// evaluation. Noise is independent across particles.
#[derive(Debug, Clone)]
pub struct PoisonedModel {
    underlying: Arc<dyn Model>,
    epsilon: f64,
    seed: u64,
}

impl PoisonedModel {
    pub fn new(underlying: Arc<dyn Model>, epsilon: f64, seed: u64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!("poisoning magnitude must be non-negative, got {epsilon}")));
        }
        Ok(PoisonedModel { underlying, epsilon, seed })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Poisoned likelihood with noise drawn from an explicit stream instead of
    /// the keyed per-entry streams used by [`Model::likelihood`].
    pub fn poison_likelihood(
        &self,
        outcomes: &[Outcome],
        params: &DMatrix<f64>,
        experiments: &[Experiment],
        rng: &mut dyn RngCore,
    ) -> Result<Likelihoods> {
        require_two_outcome(self.underlying.as_ref(), experiments, "poisoned model")?;
        let base = self.underlying.likelihood(&[0], params, experiments)?;
        let mut pr0 = DMatrix::from_fn(params.nrows(), experiments.len(), |j, k| base.get(0, j, k));
        perturb_pr0(pr0.as_mut_slice(), self.epsilon, rng);
        pr0_to_likelihoods(outcomes, &pr0)
    }

    fn experiment_key(e: &Experiment) -> u64 {
        let mut h = 0x5EED_u64;
        for (name, value) in e.fields() {
            for b in name.bytes() {
                h = mix64(h ^ u64::from(b));
            }
            match value {
                FieldValue::Int(v) => h = mix64(h ^ (*v as u64)),
                FieldValue::Real(v) => h = mix64(h ^ v.to_bits()),
                FieldValue::Vector(vs) => {
                    for v in vs {
                        h = mix64(h ^ v.to_bits());
                    }
                }
            }
        }
        h
    }
}

impl Model for PoisonedModel {
    fn name(&self) -> String {
        format!("poisoned({})", self.underlying.name())
    }

    fn n_modelparams(&self) -> usize {
        self.underlying.n_modelparams()
    }

    fn modelparam_names(&self) -> Vec<String> {
        self.underlying.modelparam_names()
    }

    fn expparams_fields(&self) -> Vec<FieldSpec> {
        self.underlying.expparams_fields()
    }

    fn n_outcomes(&self, e: &Experiment) -> Result<usize> {
        self.underlying.n_outcomes(e)
    }

    fn is_valid(&self, x: &[f64]) -> bool {
        self.underlying.is_valid(x)
    }

    fn clip_to_valid(&self, x: &mut [f64]) {
        self.underlying.clip_to_valid(x)
    }

    fn likelihood_unchecked(
        &self,
        outcomes: &[Outcome],
        params: &DMatrix<f64>,
        experiments: &[Experiment],
    ) -> Result<Likelihoods> {
        if self.epsilon == 0.0 {
            return self.underlying.likelihood_unchecked(outcomes, params, experiments);
        }
        require_two_outcome(self.underlying.as_ref(), experiments, "poisoned model")?;
        let base = self.underlying.likelihood_unchecked(&[0], params, experiments)?;
        let exp_keys: Vec<u64> = experiments.iter().map(Self::experiment_key).collect();
        let mut row = vec![0.0; params.ncols()];
        let mut pr0 = DMatrix::zeros(params.nrows(), experiments.len());
        for j in 0..params.nrows() {
            copy_row(params, j, &mut row);
            let row_key = row.iter().fold(mix64(self.seed), |h, v| mix64(h ^ v.to_bits()));
            for (k, ek) in exp_keys.iter().enumerate() {
                let mut rng = RandomStream::seed_from_u64(mix64(row_key ^ ek));
                let mut p = [base.get(0, j, k)];
                perturb_pr0(&mut p, self.epsilon, &mut rng);
                pr0[(j, k)] = p[0];
            }
        }
        pr0_to_likelihoods(outcomes, &pr0)
    }

    fn simulate_experiment(&self, true_params: &[f64], e: &Experiment, rng: &mut dyn RngCore) -> Result<Outcome> {
        self.underlying.simulate_experiment(true_params, e, rng)
    }

    fn has_timestep(&self) -> bool {
        self.underlying.has_timestep()
    }

    fn update_timestep(&self, params: &DMatrix<f64>, e: &Experiment, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        self.underlying.update_timestep(params, e, rng)
    }

    fn underlying(&self) -> Option<&dyn Model> {
        Some(self.underlying.as_ref())
    }
}

/// How the random-walk increment scales with elapsed time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum StepScaling {
    /// One unit step per update, whatever the experiment.
    PerUpdate,
    /// Standard deviation scales with `√Δt`, `Δt` read from the named
    /// experiment field (Wiener process).
    Wiener { field: String },
    /// Standard deviation scales linearly with `Δt`.
    Linear { field: String },
}

/// Gaussian increment kernel with covariance `Σ` per unit step.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepKernel {
    cov: DMatrix<f64>,
    sqrt_cov: DMatrix<f64>,
    scaling: StepScaling,
}

impl TimestepKernel {
    pub fn new(cov: DMatrix<f64>, scaling: StepScaling) -> Result<Self> {
        if cov.nrows() != cov.ncols() || cov.nrows() == 0 {
            return Err(Error::config("timestep covariance must be a non-empty square matrix"));
        }
        if !linalg::is_symmetric(&cov, 1e-12) {
            return Err(Error::config("timestep covariance is not symmetric"));
        }
        let sqrt_cov = linalg::psd_sqrt(&cov)
            .ok_or_else(|| Error::config("timestep covariance is not positive semi-definite"))?;
        Ok(TimestepKernel { cov, sqrt_cov, scaling })
    }

    /// Isotropic-free diagonal kernel from per-parameter step deviations.
    pub fn diagonal(std_devs: &[f64], scaling: StepScaling) -> Result<Self> {
        let cov = DMatrix::from_diagonal(&DVector::from_iterator(std_devs.len(), std_devs.iter().map(|s| s * s)));
        Self::new(cov, scaling)
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn scaling(&self) -> &StepScaling {
        &self.scaling
    }

    fn step_scale(&self, e: &Experiment) -> Result<f64> {
        let dt = |field: &str| -> Result<f64> {
            let dt = e.real(field)?;
            if !(dt >= 0.0) {
                return Err(Error::config(format!("elapsed time `{field}` must be non-negative, got {dt}")));
            }
            Ok(dt)
        };
        Ok(match &self.scaling {
            StepScaling::PerUpdate => 1.0,
            StepScaling::Wiener { field } => dt(field)?.sqrt(),
            StepScaling::Linear { field } => dt(field)?,
        })
    }
}

/// Adds a diffusive time step after every datum: each particle moves by a
/// Gaussian increment and is clipped back into the validity region.
#[derive(Debug, Clone)]
pub struct RandomWalkModel {
    underlying: Arc<dyn Model>,
    kernel: TimestepKernel,
}

impl RandomWalkModel {
    pub fn new(underlying: Arc<dyn Model>, kernel: TimestepKernel) -> Result<Self> {
        if kernel.cov.nrows() != underlying.n_modelparams() {
            return Err(Error::config(format!(
                "timestep covariance is {}x{}, model has {} parameters",
                kernel.cov.nrows(),
                kernel.cov.ncols(),
                underlying.n_modelparams()
            )));
        }
        Ok(RandomWalkModel { underlying, kernel })
    }

    pub fn kernel(&self) -> &TimestepKernel {
        &self.kernel
    }
}

impl Model for RandomWalkModel {
    fn name(&self) -> String {
        format!("randomwalk({})", self.underlying.name())
    }

    fn n_modelparams(&self) -> usize {
        self.underlying.n_modelparams()
    }

    fn modelparam_names(&self) -> Vec<String> {
        self.underlying.modelparam_names()
    }

    fn expparams_fields(&self) -> Vec<FieldSpec> {
        let mut f = self.underlying.expparams_fields();
        if let StepScaling::Wiener { field } | StepScaling::Linear { field } = &self.kernel.scaling {
            if !f.iter().any(|s| &s.name == field) {
                f.push(FieldSpec::new(field, FieldKind::Real));
            }
        }
        f
    }

    fn n_outcomes(&self, e: &Experiment) -> Result<usize> {
        self.underlying.n_outcomes(e)
    }

    fn is_valid(&self, x: &[f64]) -> bool {
        self.underlying.is_valid(x)
    }

    fn clip_to_valid(&self, x: &mut [f64]) {
        self.underlying.clip_to_valid(x)
    }

    fn likelihood_unchecked(
        &self,
        outcomes: &[Outcome],
        params: &DMatrix<f64>,
        experiments: &[Experiment],
    ) -> Result<Likelihoods> {
        self.underlying.likelihood_unchecked(outcomes, params, experiments)
    }

    fn simulate_experiment(&self, true_params: &[f64], e: &Experiment, rng: &mut dyn RngCore) -> Result<Outcome> {
        self.underlying.simulate_experiment(true_params, e, rng)
    }

    fn has_timestep(&self) -> bool {
        true
    }

    fn update_timestep(&self, params: &DMatrix<f64>, e: &Experiment, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        let scale = self.kernel.step_scale(e)?;
        let moved = self.underlying.update_timestep(params, e, rng)?;
        if scale == 0.0 || self.kernel.cov.iter().all(|v| *v == 0.0) {
            return Ok(moved);
        }
        let d = moved.ncols();
        let mut out = moved;
        let mut row = vec![0.0; d];
        for i in 0..out.nrows() {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let step = &self.kernel.sqrt_cov * z * scale;
            for j in 0..d {
                row[j] = out[(i, j)] + step[j];
            }
            self.underlying.clip_to_valid(&mut row);
            for j in 0..d {
                out[(i, j)] = row[j];
            }
        }
        Ok(out)
    }

    fn underlying(&self) -> Option<&dyn Model> {
        Some(self.underlying.as_ref())
    }
}
