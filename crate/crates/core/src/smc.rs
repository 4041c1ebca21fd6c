//! Sequential Monte Carlo updater.
//!
//! A [`ParticleFilter`] approximates a distribution by weighted point masses.
//! The [`Updater`] owns one filter and applies Bayes updates datum by datum:
//! `w'_k ∝ w_k · Pr(d | x_k; e)`. It tracks the effective sample size,
//! triggers Liu–West resampling when the ESS drops below a fraction of its
//! initial value, and records every update's normalization constant so the
//! model evidence is available afterwards.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;

use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::linalg::{self, stable_sum};
use crate::model::{check_params, Experiment, Model, Outcome};
use crate::resample::{liu_west_resample, should_resample, ResamplerConfig};
use crate::rng::RandomStream;

/// Maximum prior redraws per particle slot during initialization.
pub const MAX_INIT_RETRIES: usize = 1000;

/// ESS at or below which an impoverishment warning is logged.
pub const IMPOVERISHMENT_ESS: f64 = 10.0;

/// Weighted particle approximation `Σ_k w_k δ(x − x_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleFilter {
    weights: Vec<f64>,
    /// One row per particle.
    locations: DMatrix<f64>,
}

impl ParticleFilter {
    /// Builds a filter, normalizing `weights` to sum to one.
    pub fn new(weights: Vec<f64>, locations: DMatrix<f64>) -> Result<Self> {
        if weights.len() != locations.nrows() || weights.is_empty() {
            return Err(Error::config(format!(
                "{} weights for {} particle locations",
                weights.len(),
                locations.nrows()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("particle weights must be finite and non-negative"));
        }
        if locations.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("particle locations must be finite"));
        }
        let total = stable_sum(weights.iter().copied());
        if !(total > 0.0) {
            return Err(Error::config("particle weights sum to zero"));
        }
        let weights = if total == 1.0 { weights } else { weights.into_iter().map(|w| w / total).collect() };
        Ok(ParticleFilter { weights, locations })
    }

    /// Equal-weight filter over `locations`.
    pub fn uniform(locations: DMatrix<f64>) -> Result<Self> {
        let n = locations.nrows();
        Self::new(vec![1.0 / n as f64; n], locations)
    }

    pub fn n_particles(&self) -> usize {
        self.weights.len()
    }

    pub fn n_modelparams(&self) -> usize {
        self.locations.ncols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn locations(&self) -> &DMatrix<f64> {
        &self.locations
    }

    pub fn location(&self, k: usize) -> Vec<f64> {
        self.locations.row(k).iter().copied().collect()
    }

    /// Effective sample size `1 / Σ w_k²`.
    pub fn ess(&self) -> f64 {
        ess(&self.weights)
    }

    /// Weighted mean `Σ w_k x_k`.
    pub fn mean(&self) -> DVector<f64> {
        linalg::weighted_mean(&self.weights, &self.locations)
    }

    /// Weighted covariance, accumulated about the mean.
    pub fn covariance(&self) -> DMatrix<f64> {
        linalg::weighted_covariance(&self.weights, &self.locations, &self.mean())
    }
}

/// Effective sample size of a normalized weight vector. Exactly `n` for
/// equal weights.
pub fn ess(weights: &[f64]) -> f64 {
    if let Some(first) = weights.first() {
        if weights.iter().all(|w| w == first) {
            return weights.len() as f64;
        }
    }
    1.0 / stable_sum(weights.iter().map(|w| w * w))
}

/// The single-writer SMC state machine.
#[derive(Debug, Clone)]
pub struct Updater {
    model: Arc<dyn Model>,
    filter: ParticleFilter,
    resampler: ResamplerConfig,
    rng: RandomStream,
    n_ess_initial: f64,
    min_ess_observed: f64,
    normalization_record: Vec<f64>,
    ess_trace: Vec<f64>,
    n_resamples: usize,
    exhausted_redraws: usize,
    workers: usize,
}

impl Updater {
    /// Samples `n_particles` valid locations from `prior` with equal weights.
    /// Invalid draws are redrawn up to [`MAX_INIT_RETRIES`] times per slot.
    pub fn new(
        model: Arc<dyn Model>,
        n_particles: usize,
        prior: &Distribution,
        resampler: ResamplerConfig,
        mut rng: RandomStream,
    ) -> Result<Self> {
        if n_particles < 2 {
            return Err(Error::config(format!("need at least 2 particles, got {n_particles}")));
        }
        let d = model.n_modelparams();
        if prior.dim() != d {
            return Err(Error::config(format!(
                "prior has {} dimensions, {} has {d} parameters",
                prior.dim(),
                model.name()
            )));
        }
        let mut locations = DMatrix::zeros(n_particles, d);
        let mut row = vec![0.0; d];
        for k in 0..n_particles {
            let mut attempts = 0;
            loop {
                prior.sample_one(&mut row, &mut rng);
                if model.is_valid(&row) {
                    break;
                }
                attempts += 1;
                if attempts > MAX_INIT_RETRIES {
                    return Err(Error::Initialization(format!(
                        "prior produced no valid {} parameters in {MAX_INIT_RETRIES} draws",
                        model.name()
                    )));
                }
            }
            for (j, v) in row.iter().enumerate() {
                locations[(k, j)] = *v;
            }
        }
        Self::from_filter(model, ParticleFilter::uniform(locations)?, resampler, rng)
    }

    /// Starts from an explicit filter, e.g. grid-placed particles.
    pub fn from_filter(
        model: Arc<dyn Model>,
        filter: ParticleFilter,
        resampler: ResamplerConfig,
        rng: RandomStream,
    ) -> Result<Self> {
        resampler.validate()?;
        check_params(model.as_ref(), filter.locations())?;
        let n_ess = filter.ess();
        Ok(Updater {
            model,
            filter,
            resampler,
            rng,
            n_ess_initial: n_ess,
            min_ess_observed: n_ess,
            normalization_record: Vec::new(),
            ess_trace: Vec::new(),
            n_resamples: 0,
            exhausted_redraws: 0,
            workers: 1,
        })
    }

    /// Shards each likelihood batch over `workers` disjoint particle chunks.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn model(&self) -> &Arc<dyn Model> {
        &self.model
    }

    pub fn filter(&self) -> &ParticleFilter {
        &self.filter
    }

    pub fn resampler(&self) -> &ResamplerConfig {
        &self.resampler
    }

    pub fn rng(&self) -> &RandomStream {
        &self.rng
    }

    pub fn n_particles(&self) -> usize {
        self.filter.n_particles()
    }

    pub fn n_ess_initial(&self) -> f64 {
        self.n_ess_initial
    }

    pub fn min_ess_observed(&self) -> f64 {
        self.min_ess_observed
    }

    pub fn normalization_record(&self) -> &[f64] {
        &self.normalization_record
    }

    /// ESS after each update, before any resampling it triggered.
    pub fn ess_trace(&self) -> &[f64] {
        &self.ess_trace
    }

    pub fn data_count(&self) -> usize {
        self.normalization_record.len()
    }

    pub fn n_resamples(&self) -> usize {
        self.n_resamples
    }

    /// Resampled particles that kept their parent location after every
    /// kernel redraw was invalid.
    pub fn exhausted_redraws(&self) -> usize {
        self.exhausted_redraws
    }

    pub fn ess(&self) -> f64 {
        self.filter.ess()
    }

    pub fn est_mean(&self) -> Vec<f64> {
        self.filter.mean().as_slice().to_vec()
    }

    pub fn est_covariance(&self) -> DMatrix<f64> {
        self.filter.covariance()
    }

    /// `ln Pr(d₁…d_N)`: sum of the logs of the recorded normalizations.
    pub fn log_evidence(&self) -> f64 {
        self.normalization_record.iter().map(|p| p.ln()).sum()
    }

    /// `Pr(d | x_k; e)` for every particle.
    pub fn particle_likelihoods(&self, outcome: Outcome, experiment: &Experiment) -> Result<Vec<f64>> {
        let locs = self.filter.locations();
        let n = locs.nrows();
        let exps = std::slice::from_ref(experiment);
        if self.workers <= 1 || n < 2 * self.workers {
            return Ok(self.model.likelihood(&[outcome], locs, exps)?.as_slice().to_vec());
        }
        let chunk = n.div_ceil(self.workers);
        let parts: Vec<Result<Vec<f64>>> = (0..self.workers)
            .into_par_iter()
            .map(|w| {
                let start = w * chunk;
                let len = chunk.min(n.saturating_sub(start));
                if len == 0 {
                    return Ok(Vec::new());
                }
                let block = locs.rows(start, len).into_owned();
                Ok(self.model.likelihood(&[outcome], &block, exps)?.as_slice().to_vec())
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }

    /// Bayes update for a single datum.
    ///
    /// On error the state is left untouched.
    pub fn update(&mut self, outcome: Outcome, experiment: &Experiment) -> Result<()> {
        let n_outcomes = self.model.n_outcomes(experiment)?;
        if outcome >= n_outcomes {
            return Err(Error::config(format!(
                "outcome {outcome} is impossible for an experiment with {n_outcomes} outcomes"
            )));
        }
        let like = self.particle_likelihoods(outcome, experiment)?;
        if like.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::NumericDomain("likelihood produced a negative or non-finite value".into()));
        }
        let weights = self.filter.weights();
        let norm = stable_sum(weights.iter().zip(&like).map(|(w, l)| w * l));
        if !(norm > 0.0) {
            return Err(Error::ZeroEvidence {
                datum: format!("{outcome} for experiment {}", serde_json::to_string(experiment).unwrap_or_default()),
            });
        }
        let new_weights: Vec<f64> = weights.iter().zip(&like).map(|(w, l)| w * l / norm).collect();
        let moved = if self.model.has_timestep() {
            Some(self.model.update_timestep(self.filter.locations(), experiment, &mut self.rng)?)
        } else {
            None
        };
        let total = stable_sum(new_weights.iter().copied());
        self.filter.weights =
            if total == 1.0 { new_weights } else { new_weights.into_iter().map(|w| w / total).collect() };
        if let Some(locations) = moved {
            self.filter.locations = locations;
        }
        self.normalization_record.push(norm);

        let ess = self.filter.ess();
        self.ess_trace.push(ess);
        self.min_ess_observed = self.min_ess_observed.min(ess);
        if ess <= IMPOVERISHMENT_ESS {
            log::warn!("particle filter impoverished: effective sample size {ess:.3} after datum {}", self.data_count());
        }
        if self.resampler.enabled && should_resample(ess, self.n_ess_initial, self.resampler.threshold) {
            self.resample()?;
        }
        Ok(())
    }

    /// Runs the configured resampler unconditionally.
    pub fn resample(&mut self) -> Result<()> {
        let (filter, report) = liu_west_resample(&self.filter, &self.resampler, self.model.as_ref(), &mut self.rng)?;
        self.filter = filter;
        self.n_resamples += 1;
        self.exhausted_redraws += report.exhausted_redraws;
        Ok(())
    }

    /// Processes a sequence of (outcome, experiment) pairs.
    pub fn batch_update<'a>(&mut self, data: impl IntoIterator<Item = (Outcome, &'a Experiment)>) -> Result<()> {
        for (d, e) in data {
            self.update(d, e)?;
        }
        Ok(())
    }

    /// Expected trace of the posterior covariance after performing `e`,
    /// averaged over its outcomes. The state is not modified.
    pub fn hypothetical_update_variance(&self, e: &Experiment) -> Result<f64> {
        let n_outcomes = self.model.n_outcomes(e)?;
        let outcomes: Vec<Outcome> = (0..n_outcomes).collect();
        let l = self.model.likelihood(&outcomes, self.filter.locations(), std::slice::from_ref(e))?;
        let weights = self.filter.weights();
        let mut expected = 0.0;
        for d in 0..n_outcomes {
            let joint: Vec<f64> = weights.iter().enumerate().map(|(k, w)| w * l.get(d, k, 0)).collect();
            let pd = stable_sum(joint.iter().copied());
            if pd <= 0.0 {
                continue;
            }
            let post: Vec<f64> = joint.iter().map(|v| v / pd).collect();
            let mean = linalg::weighted_mean(&post, self.filter.locations());
            let cov = linalg::weighted_covariance(&post, self.filter.locations(), &mean);
            expected += pd * cov.trace();
        }
        Ok(expected)
    }

    /// Advances the owned random stream; used by callers that need draws
    /// tied to this updater's lineage.
    pub fn rng_mut(&mut self) -> &mut dyn RngCore {
        &mut self.rng
    }

    pub(crate) fn restore(
        model: Arc<dyn Model>,
        filter: ParticleFilter,
        resampler: ResamplerConfig,
        rng: RandomStream,
        counters: RestoredCounters,
    ) -> Result<Self> {
        let mut u = Self::from_filter(model, filter, resampler, rng)?;
        u.n_ess_initial = counters.n_ess_initial;
        u.min_ess_observed = counters.min_ess_observed;
        u.normalization_record = counters.normalization_record;
        u.ess_trace = counters.ess_trace;
        u.n_resamples = counters.n_resamples;
        Ok(u)
    }
}

pub(crate) struct RestoredCounters {
    pub n_ess_initial: f64,
    pub min_ess_observed: f64,
    pub normalization_record: Vec<f64>,
    pub ess_trace: Vec<f64>,
    pub n_resamples: usize,
}

/// `exp(ln Z_a − ln Z_b)`; both updaters must have seen the same number of data.
pub fn bayes_factor(a: &Updater, b: &Updater) -> Result<f64> {
    if a.data_count() != b.data_count() {
        return Err(Error::State(format!(
            "evidence records differ in length ({} vs {}); updaters must process the same data",
            a.data_count(),
            b.data_count()
        )));
    }
    Ok((a.log_evidence() - b.log_evidence()).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{PrecessionModel, RandomizedBenchmarkingModel};
    use crate::rng::stream_from_seed;

    /// Two-outcome test model whose likelihood is a fixed per-particle table
    /// keyed by the particle's single coordinate (its index).
    #[derive(Debug)]
    struct TableModel {
        pr0: Vec<f64>,
    }

    impl Model for TableModel {
        fn name(&self) -> String {
            "table".into()
        }
        fn n_modelparams(&self) -> usize {
            1
        }
        fn modelparam_names(&self) -> Vec<String> {
            vec!["k".into()]
        }
        fn expparams_fields(&self) -> Vec<crate::model::FieldSpec> {
            vec![]
        }
        fn n_outcomes(&self, _e: &Experiment) -> Result<usize> {
            Ok(2)
        }
        fn is_valid(&self, _x: &[f64]) -> bool {
            true
        }
        fn likelihood_unchecked(
            &self,
            outcomes: &[Outcome],
            params: &DMatrix<f64>,
            experiments: &[Experiment],
        ) -> Result<crate::model::Likelihoods> {
            let pr0 = DMatrix::from_fn(params.nrows(), experiments.len(), |j, _| self.pr0[params[(j, 0)] as usize]);
            crate::model::pr0_to_likelihoods(outcomes, &pr0)
        }
    }

    fn table_updater(pr0: Vec<f64>, weights: Vec<f64>) -> Updater {
        let n = pr0.len();
        let filter = ParticleFilter::new(weights, DMatrix::from_fn(n, 1, |i, _| i as f64)).unwrap();
        let cfg = ResamplerConfig { enabled: false, ..Default::default() };
        Updater::from_filter(Arc::new(TableModel { pr0 }), filter, cfg, stream_from_seed(0)).unwrap()
    }

    #[test]
    fn hand_arithmetic_update() {
        let mut u = table_updater(vec![0.2, 0.6], vec![0.5, 0.5]);
        u.update(0, &Experiment::new()).unwrap();
        let w = u.filter().weights();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        assert!((u.normalization_record()[0] - 0.4).abs() < 1e-15);
        assert!((u.log_evidence() - 0.4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uninformative_datum_leaves_weights() {
        let mut u = table_updater(vec![0.3; 3], vec![0.2, 0.3, 0.5]);
        u.update(0, &Experiment::new()).unwrap();
        assert_eq!(u.filter().weights(), &[0.2, 0.3, 0.5]);
        assert_eq!(u.normalization_record(), &[0.3]);
    }

    #[test]
    fn impossible_datum_is_degeneracy_error() {
        let mut u = table_updater(vec![1.0, 1.0], vec![0.5, 0.5]);
        let before = u.filter().clone();
        let err = u.update(1, &Experiment::new()).unwrap_err();
        assert!(matches!(err, Error::ZeroEvidence { .. }));
        assert_eq!(u.filter(), &before);
        assert_eq!(u.data_count(), 0);
    }

    #[test]
    fn ess_spot_values() {
        assert_eq!(ess(&[0.25; 4]), 4.0);
        assert_eq!(ess(&[0.5, 0.5, 0.0, 0.0]), 2.0);
        assert_eq!(ess(&[1.0, 0.0, 0.0, 0.0]), 1.0);
    }

    #[test]
    fn mean_and_covariance_spot_values() {
        let f = ParticleFilter::uniform(DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        assert_eq!(f.mean()[0], 0.5);
        let f = ParticleFilter::new(vec![0.25, 0.75], DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        assert_eq!(f.mean()[0], 0.75);
        let f = ParticleFilter::uniform(DMatrix::from_element(5, 2, 0.3)).unwrap();
        assert_eq!(f.covariance(), DMatrix::zeros(2, 2));
        let f = ParticleFilter::uniform(DMatrix::from_column_slice(2, 1, &[-1.0, 1.0])).unwrap();
        assert_eq!(f.covariance()[(0, 0)], 1.0);
    }

    #[test]
    fn covariance_matches_moment_reference() {
        let mut rng = stream_from_seed(8);
        let prior = Distribution::uniform(vec![[0.0, 1.0], [-2.0, 3.0], [5.0, 6.0]]).unwrap();
        let locs = prior.sample(50, &mut rng).unwrap();
        let w: Vec<f64> = (0..50).map(|i| 1.0 + (i as f64 * 0.37).sin().abs()).collect();
        let f = ParticleFilter::new(w, locs.clone()).unwrap();
        // reference: E[xxᵀ] − E[x]E[x]ᵀ in two explicit passes
        let wn = f.weights();
        let mut mean = [0.0; 3];
        for k in 0..50 {
            for i in 0..3 {
                mean[i] += wn[k] * locs[(k, i)];
            }
        }
        let cov = f.covariance();
        for i in 0..3 {
            for j in 0..3 {
                let mut second = 0.0;
                for k in 0..50 {
                    second += wn[k] * locs[(k, i)] * locs[(k, j)];
                }
                assert!((cov[(i, j)] - (second - mean[i] * mean[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_uniform() {
        let prior = Distribution::uniform(vec![[0.0, 1.0]]).unwrap();
        let m: Arc<dyn Model> = Arc::new(PrecessionModel::new());
        let a = Updater::new(m.clone(), 2000, &prior, ResamplerConfig::default(), stream_from_seed(4)).unwrap();
        let b = Updater::new(m, 2000, &prior, ResamplerConfig::default(), stream_from_seed(4)).unwrap();
        assert_eq!(a.filter(), b.filter());
        assert_eq!(a.ess(), 2000.0);
        assert_eq!(a.n_ess_initial(), 2000.0);
    }

    #[test]
    fn prior_outside_validity_fails_init() {
        let prior = Distribution::uniform(vec![[2.0, 3.0]]).unwrap();
        let r = Updater::new(Arc::new(PrecessionModel::new()), 10, &prior, ResamplerConfig::default(), stream_from_seed(1));
        assert!(matches!(r, Err(Error::Initialization(_))));
    }

    #[test]
    fn hypothetical_variance_edge_cases() {
        // constant likelihood: no information
        let u = table_updater(vec![0.4; 3], vec![0.2, 0.3, 0.5]);
        let tr = u.est_covariance().trace();
        assert!((u.hypothetical_update_variance(&Experiment::new()).unwrap() - tr).abs() < 1e-15);
        // each outcome selects a single particle
        let u = table_updater(vec![1.0, 0.0], vec![0.5, 0.5]);
        assert_eq!(u.hypothetical_update_variance(&Experiment::new()).unwrap(), 0.0);
    }

    #[test]
    fn hypothetical_variance_two_particle_enumeration() {
        // particles at 0 and 1 with weights (0.4, 0.6), Pr(0|x) = (0.3, 0.8)
        let u = table_updater(vec![0.3, 0.8], vec![0.4, 0.6]);
        let p0 = 0.4 * 0.3 + 0.6 * 0.8;
        let a0 = 0.4 * 0.3 / p0;
        let p1 = 0.4 * 0.7 + 0.6 * 0.2;
        let a1 = 0.4 * 0.7 / p1;
        // variance of a two-point distribution on {0,1} with mass a at 0
        let expect = p0 * a0 * (1.0 - a0) + p1 * a1 * (1.0 - a1);
        assert!((u.hypothetical_update_variance(&Experiment::new()).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn sharded_likelihood_matches_serial() {
        let prior = Distribution::uniform(vec![[0.8, 1.0], [0.0, 0.5], [0.0, 0.5]]).unwrap();
        let m: Arc<dyn Model> = Arc::new(RandomizedBenchmarkingModel::default());
        let serial = Updater::new(m.clone(), 1001, &prior, ResamplerConfig::default(), stream_from_seed(2)).unwrap();
        let sharded = serial.clone().with_workers(4);
        let e = Experiment::new().with_int("m", 17);
        assert_eq!(serial.particle_likelihoods(1, &e).unwrap(), sharded.particle_likelihoods(1, &e).unwrap());
    }

    #[test]
    fn bayes_factor_requires_matching_records() {
        let mut a = table_updater(vec![0.2, 0.6], vec![0.5, 0.5]);
        let b = table_updater(vec![0.2, 0.6], vec![0.5, 0.5]);
        assert_eq!(bayes_factor(&a, &b).unwrap(), 1.0);
        a.update(0, &Experiment::new()).unwrap();
        assert!(matches!(bayes_factor(&a, &b), Err(Error::State(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(64))]

        #[test]
        fn update_keeps_weights_normalized(
            pr0 in proptest::collection::vec(0.01f64..0.99, 1..30),
            outcomes in proptest::collection::vec(0usize..2, 1..10),
        ) {
            let n = pr0.len();
            let mut u = table_updater(pr0, vec![1.0 / n as f64; n]);
            for d in outcomes {
                u.update(d, &Experiment::new()).unwrap();
                let total: f64 = u.filter().weights().iter().sum();
                proptest::prop_assert!((total - 1.0).abs() < 1e-12);
                proptest::prop_assert!(u.ess() >= 1.0 - 1e-9 && u.ess() <= n as f64 + 1e-9);
            }
            proptest::prop_assert!(u.log_evidence() <= 0.0);
        }
    }
}
