//! Liu–West resampling.
//!
//! Each new particle picks a parent `x_k` with probability `w_k`, then draws
//! from a normal kernel centred at `a·x_k + (1−a)·μ` with covariance `h²Σ`,
//! where `h = √(1−a²)` and `μ`, `Σ` are the filter's mean and covariance.
//! The contraction towards `μ` exactly offsets the kernel's added spread, so
//! the first two moments survive resampling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, symmetrize};
use crate::model::Model;
use crate::smc::ParticleFilter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResamplerConfig {
    /// Contraction parameter in `[0, 1]`.
    pub a: f64,
    /// Resample when ESS falls strictly below `threshold · n_ess_initial`.
    pub threshold: f64,
    pub max_redraw_attempts: usize,
    pub enabled: bool,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        ResamplerConfig { a: 0.98, threshold: 0.5, max_redraw_attempts: 100, enabled: true }
    }
}

impl ResamplerConfig {
    pub fn with_a(a: f64) -> Self {
        ResamplerConfig { a, ..Default::default() }
    }

    /// Kernel bandwidth `√(1 − a²)`.
    pub fn h(&self) -> f64 {
        (1.0 - self.a * self.a).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a) {
            return Err(Error::config(format!("resampler a = {} must lie in [0, 1]", self.a)));
        }
        if !(self.threshold.is_finite() && (0.0..=1.0).contains(&self.threshold)) {
            return Err(Error::config(format!("resample threshold {} must lie in [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ResampleReport {
    /// Particles that kept their parent's location after every kernel draw
    /// was invalid.
    pub exhausted_redraws: usize,
    /// The filter had collapsed to a single point; parents were duplicated.
    pub collapsed: bool,
}

/// Strict test `ess < threshold · n_ess_initial`.
pub fn should_resample(ess: f64, n_ess_initial: f64, threshold: f64) -> bool {
    ess < threshold * n_ess_initial
}

/// Inverse-CDF sampler over particle indices.
struct ParentSampler {
    cumulative: Vec<f64>,
    total: f64,
    last_positive: usize,
}

impl ParentSampler {
    fn new(weights: &[f64]) -> Self {
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut total = 0.0;
        for w in weights {
            total += w;
            cumulative.push(total);
        }
        let last_positive = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
        ParentSampler { cumulative, total, last_positive }
    }

    fn draw(&self, rng: &mut dyn RngCore) -> usize {
        let u: f64 = rng.random::<f64>() * self.total;
        self.cumulative.partition_point(|c| *c <= u).min(self.last_positive)
    }
}

/// Resamples `filter`, returning an equal-weight filter of the same size.
pub fn liu_west_resample(
    filter: &ParticleFilter,
    config: &ResamplerConfig,
    model: &dyn Model,
    rng: &mut dyn RngCore,
) -> Result<(ParticleFilter, ResampleReport)> {
    config.validate()?;
    let n = filter.n_particles();
    let d = filter.n_modelparams();
    let locs = filter.locations();
    let sampler = ParentSampler::new(filter.weights());
    let parents: Vec<usize> = (0..n).map(|_| sampler.draw(rng)).collect();
    let mut out = DMatrix::zeros(n, d);
    let mut report = ResampleReport::default();

    let copy_parents = |out: &mut DMatrix<f64>| {
        for (i, &k) in parents.iter().enumerate() {
            out.row_mut(i).copy_from(&locs.row(k));
        }
    };

    if config.a == 1.0 {
        copy_parents(&mut out);
        return Ok((ParticleFilter::uniform(out)?, report));
    }

    let mean = filter.mean();
    let mut cov = filter.covariance();
    let trace = cov.trace();
    if !(trace > 0.0) {
        log::warn!("resampling a collapsed filter (zero covariance); duplicating parents");
        report.collapsed = true;
        copy_parents(&mut out);
        return Ok((ParticleFilter::uniform(out)?, report));
    }
    let ridge = 1e-12 * trace / d as f64;
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    symmetrize(&mut cov);
    let h = config.h();
    let sqrt_cov = psd_sqrt(&cov)
        .ok_or_else(|| Error::Degenerate("posterior covariance is not positive semidefinite".into()))?
        * h;

    let a = config.a;
    let shift: DVector<f64> = &mean * (1.0 - a);
    let mut candidate = vec![0.0; d];
    let mut z = DVector::zeros(d);
    for (i, &first) in parents.iter().enumerate() {
        // A rejected draw repeats both steps, parent and kernel, so the output
        // follows the kernel mixture truncated to the valid region.
        let mut k = first;
        let mut accepted = false;
        for attempt in 0..=config.max_redraw_attempts {
            if attempt > 0 {
                k = sampler.draw(rng);
            }
            let centre: DVector<f64> = locs.row(k).transpose() * a + &shift;
            for zj in z.iter_mut() {
                *zj = rng.sample(StandardNormal);
            }
            let draw = &centre + &sqrt_cov * &z;
            candidate.copy_from_slice(draw.as_slice());
            if candidate.iter().all(|v| v.is_finite()) && model.is_valid(&candidate) {
                accepted = true;
                break;
            }
        }
        if accepted {
            for (j, v) in candidate.iter().enumerate() {
                out[(i, j)] = *v;
            }
        } else {
            report.exhausted_redraws += 1;
            out.row_mut(i).copy_from(&locs.row(k));
        }
    }
    if report.exhausted_redraws > 0 {
        log::warn!(
            "{} resampled particles kept their parent location after {} invalid kernel draws",
            report.exhausted_redraws,
            config.max_redraw_attempts + 1
        );
    }
    Ok((ParticleFilter::uniform(out)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Distribution;
    use crate::models::{PrecessionModel, RandomizedBenchmarkingModel};
    use crate::rng::stream_from_seed;

    fn skewed_filter(n: usize, seed: u64) -> ParticleFilter {
        let mut rng = stream_from_seed(seed);
        let locs = Distribution::uniform(vec![[0.0, 1.0]]).unwrap().sample(n, &mut rng).unwrap();
        let w: Vec<f64> = (0..n).map(|k| (-(locs[(k, 0)] - 0.4f64).powi(2) / 0.02).exp()).collect();
        ParticleFilter::new(w, locs).unwrap()
    }

    #[test]
    fn bootstrap_copies_inputs_exactly() {
        let f = skewed_filter(200, 1);
        let (out, _) = liu_west_resample(&f, &ResamplerConfig::with_a(1.0), &PrecessionModel::new(), &mut stream_from_seed(2)).unwrap();
        let inputs: Vec<f64> = f.locations().iter().copied().collect();
        assert!(out.locations().iter().all(|v| inputs.contains(v)));
        assert_eq!(out.ess(), 200.0);
    }

    #[test]
    fn h_squared_plus_a_squared_is_one() {
        for a in [0.0, 0.5, 0.98, 1.0] {
            let c = ResamplerConfig::with_a(a);
            assert!((c.a * c.a + c.h() * c.h() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn assumed_density_limit_matches_moments() {
        let f = skewed_filter(10_000, 3);
        let (out, _) =
            liu_west_resample(&f, &ResamplerConfig::with_a(0.0), &PrecessionModel::new(), &mut stream_from_seed(4)).unwrap();
        let (m0, v0) = (f.mean()[0], f.covariance()[(0, 0)]);
        assert!((out.mean()[0] - m0).abs() < 4.0 * (v0 / 1e4).sqrt());
        assert!((out.covariance()[(0, 0)] / v0 - 1.0).abs() < 0.1);
    }

    #[test]
    fn should_resample_boundaries() {
        assert!(!should_resample(100.0, 100.0, 0.5));
        assert!(should_resample(1.0, 100.0, 0.5));
        assert!(!should_resample(50.0, 100.0, 0.5));
    }

    #[test]
    fn collapsed_filter_duplicates_parents() {
        let f = ParticleFilter::uniform(DMatrix::from_element(10, 1, 0.3)).unwrap();
        let (out, rep) = liu_west_resample(&f, &ResamplerConfig::default(), &PrecessionModel::new(), &mut stream_from_seed(0)).unwrap();
        assert!(rep.collapsed);
        assert!(out.locations().iter().all(|v| *v == 0.3));
    }

    #[test]
    fn outputs_respect_validity() {
        // RB particles hugging the A + B ≤ 1 edge force frequent redraws
        let mut rng = stream_from_seed(5);
        let prior = Distribution::uniform(vec![[0.9, 1.0], [0.45, 0.55], [0.45, 0.55]]).unwrap();
        let model = RandomizedBenchmarkingModel::default();
        let mut locs = prior.sample(2000, &mut rng).unwrap();
        for mut r in locs.row_iter_mut() {
            if r[1] + r[2] > 1.0 {
                r[2] = 1.0 - r[1];
            }
        }
        let f = ParticleFilter::uniform(locs).unwrap();
        let (out, _) = liu_west_resample(&f, &ResamplerConfig::with_a(0.5), &model, &mut rng).unwrap();
        for r in out.locations().row_iter() {
            assert!(model.is_valid(&[r[0], r[1], r[2]]));
        }
    }

    #[test]
    fn exhausted_redraws_keep_parent() {
        let f = ParticleFilter::uniform(DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        let cfg = ResamplerConfig { a: 0.0, max_redraw_attempts: 0, ..Default::default() };
        // draws from N(0.5, 0.25) land outside [0, 1] about 5% of the time
        let (out, rep) = liu_west_resample(&f, &cfg, &PrecessionModel::new(), &mut stream_from_seed(6)).unwrap();
        assert_eq!(out.n_particles(), 2);
        for v in out.locations().iter() {
            assert!((0.0..=1.0).contains(v));
        }
        let parents = out.locations().iter().filter(|v| **v == 0.0 || **v == 1.0).count();
        assert_eq!(rep.exhausted_redraws, parents);
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(32))]

        #[test]
        fn resampled_filter_is_uniform_and_valid(seed in 0u64..1000, n in 2usize..300, a in 0.0f64..=1.0) {
            let f = skewed_filter(n, seed);
            let (out, _) = liu_west_resample(&f, &ResamplerConfig::with_a(a), &PrecessionModel::new(), &mut stream_from_seed(seed + 1)).unwrap();
            proptest::prop_assert_eq!(out.n_particles(), n);
            proptest::prop_assert_eq!(out.ess(), n as f64);
            proptest::prop_assert!(out.locations().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
