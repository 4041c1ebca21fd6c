//! Scores, Fisher information and the Cramér–Rao and van Trees bounds, using
//! numerical differentiation of any model's likelihood.

use nalgebra::DMatrix;
use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetrize};
use crate::model::{check_params, Experiment, Model, Outcome};

/// Relative step of the central difference: `h_i = STEP · max(1, |x_i|)`.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Outcomes less likely than this are left out of information sums.
pub const MIN_OUTCOME_PROB: f64 = 1e-12;

/// Relative disagreement between step `h` and `h/2` that triggers a warning.
const RICHARDSON_RTOL: f64 = 1e-4;

pub const DEFAULT_PRIOR_SAMPLES: usize = 10_000;

fn steps(x: &[f64], step: f64) -> Vec<f64> {
    x.iter().map(|v| step * v.abs().max(1.0)).collect()
}

/// Probabilities of every listed outcome and the central-difference score
/// of each, evaluated in one likelihood batch. Rows of the batch are `x`,
/// then `x ± h e_i` and `x ± (h/2) e_i` for each axis.
fn probs_and_scores(
    model: &dyn Model,
    outcomes: &[Outcome],
    x: &[f64],
    e: &Experiment,
    step: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = x.len();
    let base = DMatrix::from_row_slice(1, d, x);
    check_params(model, &base)?;
    if !(step > 0.0) {
        return Err(Error::config(format!("differentiation step {step} must be positive")));
    }
    let h = steps(x, step);
    let mut rows = DMatrix::zeros(1 + 4 * d, d);
    for r in 0..rows.nrows() {
        rows.row_mut(r).copy_from(&base.row(0));
    }
    for i in 0..d {
        rows[(1 + 4 * i, i)] += h[i];
        rows[(2 + 4 * i, i)] -= h[i];
        rows[(3 + 4 * i, i)] += 0.5 * h[i];
        rows[(4 + 4 * i, i)] -= 0.5 * h[i];
    }
    // perturbed rows may sit just outside the validity region; the formula
    // is still well defined there
    let l = model.likelihood_unchecked(outcomes, &rows, std::slice::from_ref(e))?;
    let mut probs = Vec::with_capacity(outcomes.len());
    let mut scores = Vec::with_capacity(outcomes.len());
    for (o, &outcome) in outcomes.iter().enumerate() {
        let p = l.get(o, 0, 0);
        probs.push(p);
        if !(p > MIN_OUTCOME_PROB) {
            scores.push(Vec::new());
            continue;
        }
        let mut s = vec![0.0; d];
        for i in 0..d {
            let at = |r: usize| l.get(o, r, 0);
            let (fp, fm, hp, hm) = (at(1 + 4 * i), at(2 + 4 * i), at(3 + 4 * i), at(4 + 4 * i));
            if [fp, fm, hp, hm].iter().any(|v| !(*v > 0.0)) {
                return Err(Error::NumericDomain(format!(
                    "likelihood of outcome {outcome} vanishes within one step of x along axis {i}"
                )));
            }
            let full = (fp.ln() - fm.ln()) / (2.0 * h[i]);
            let half = (hp.ln() - hm.ln()) / h[i];
            if (full - half).abs() > RICHARDSON_RTOL * full.abs().max(1.0) {
                log::warn!(
                    "score of outcome {outcome} along axis {i} is step-sensitive ({full:e} vs {half:e} at half step)"
                );
            }
            s[i] = full;
        }
        scores.push(s);
    }
    Ok((probs, scores))
}

/// `∂ ln Pr(d | x; e) / ∂x` by central differences.
pub fn score(model: &dyn Model, outcome: Outcome, x: &[f64], e: &Experiment, step: Option<f64>) -> Result<Vec<f64>> {
    let (probs, mut scores) = probs_and_scores(model, &[outcome], x, e, step.unwrap_or(DEFAULT_STEP))?;
    if !(probs[0] > MIN_OUTCOME_PROB) {
        return Err(Error::NumericDomain(format!(
            "score undefined: outcome {outcome} has likelihood {} at x",
            probs[0]
        )));
    }
    Ok(scores.remove(0))
}

/// `Σ_d Pr(d | x; e) · s_d s_dᵀ` over every outcome of `e`.
pub fn fisher_information(model: &dyn Model, x: &[f64], e: &Experiment) -> Result<DMatrix<f64>> {
    let outcomes: Vec<Outcome> = (0..model.n_outcomes(e)?).collect();
    let (probs, scores) = probs_and_scores(model, &outcomes, x, e, DEFAULT_STEP)?;
    let d = x.len();
    let mut fi = DMatrix::zeros(d, d);
    for (p, s) in probs.iter().zip(&scores) {
        if !(*p > MIN_OUTCOME_PROB) {
            continue;
        }
        for i in 0..d {
            for j in 0..d {
                fi[(i, j)] += p * s[i] * s[j];
            }
        }
    }
    symmetrize(&mut fi);
    Ok(fi)
}

/// Information summed over `experiments`.
pub fn total_information(model: &dyn Model, x: &[f64], experiments: &[Experiment]) -> Result<DMatrix<f64>> {
    let d = x.len();
    let mut total = DMatrix::zeros(d, d);
    for e in experiments {
        total += fisher_information(model, x, e)?;
    }
    Ok(total)
}

fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if info.nrows() == 1 {
        let v = info[(0, 0)];
        if !(v > 0.0) {
            return Err(Error::Unidentifiable { null_direction: vec![1.0] });
        }
        return Ok(DMatrix::from_element(1, 1, 1.0 / v));
    }
    spd_inverse(info).map_err(|null_direction| Error::Unidentifiable { null_direction })
}

/// `(Σ_e FI(x; e))⁻¹`.
pub fn cramer_rao_bound(model: &dyn Model, x: &[f64], experiments: &[Experiment]) -> Result<DMatrix<f64>> {
    invert_information(&total_information(model, x, experiments)?)
}

/// Per-experiment information and the running bound after each experiment.
#[derive(Clone, Debug, Serialize)]
pub struct BoundTrace {
    pub information: Vec<Vec<Vec<f64>>>,
    /// `None` until the accumulated information becomes invertible.
    pub cumulative_bound: Vec<Option<Vec<Vec<f64>>>>,
    pub cumulative_trace: Vec<Option<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Cramér–Rao bound trace. Fails if the information over all of
/// `experiments` is singular.
pub fn bound_trace(model: &dyn Model, x: &[f64], experiments: &[Experiment]) -> Result<BoundTrace> {
    let d = x.len();
    let mut total = DMatrix::zeros(d, d);
    let mut out = BoundTrace { information: Vec::new(), cumulative_bound: Vec::new(), cumulative_trace: Vec::new() };
    let mut last = Err(Error::Unidentifiable { null_direction: vec![1.0; d.min(1)] });
    for e in experiments {
        let fi = fisher_information(model, x, e)?;
        total += &fi;
        out.information.push(rows_of(&fi));
        last = invert_information(&total);
        match &last {
            Ok(b) => {
                out.cumulative_bound.push(Some(rows_of(b)));
                out.cumulative_trace.push(Some(b.trace()));
            }
            Err(_) => {
                out.cumulative_bound.push(None);
                out.cumulative_trace.push(None);
            }
        }
    }
    last.map(|_| out)
}

/// Maximum prior redraws per sample when a draw is invalid for the model.
const MAX_PRIOR_REDRAWS: usize = 1000;

/// Bayesian Cramér–Rao bound `(E_π[FI] + J_π)⁻¹`.
///
/// `E_π[FI]` is averaged over `n_prior_samples` prior draws (redrawn until
/// valid for the model). `J_π`, the prior's own information, is the exact
/// expectation of its score outer product; priors without a differentiable
/// density are rejected.
pub fn van_trees_bound(
    model: &dyn Model,
    prior: &Distribution,
    experiments: &[Experiment],
    n_prior_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<DMatrix<f64>> {
    if n_prior_samples == 0 {
        return Err(Error::config("van Trees bound needs at least one prior sample"));
    }
    let d = model.n_modelparams();
    if prior.dim() != d {
        return Err(Error::config(format!("prior has {} dimensions, model has {d}", prior.dim())));
    }
    let prior_info = prior.information()?;
    let mut samples = Vec::with_capacity(n_prior_samples);
    let mut x = vec![0.0; d];
    for _ in 0..n_prior_samples {
        let mut tries = 0;
        loop {
            prior.sample_one(&mut x, rng);
            if model.is_valid(&x) {
                break;
            }
            tries += 1;
            if tries > MAX_PRIOR_REDRAWS {
                return Err(Error::Initialization(format!(
                    "prior produced no valid {} parameters in {MAX_PRIOR_REDRAWS} draws",
                    model.name()
                )));
            }
        }
        samples.push(x.clone());
    }
    let infos: Vec<Result<DMatrix<f64>>> =
        samples.par_iter().map(|s| total_information(model, s, experiments)).collect();
    let mut expected = DMatrix::zeros(d, d);
    for fi in infos {
        expected += fi?;
    }
    expected /= n_prior_samples as f64;
    invert_information(&(expected + prior_info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{PrecessionModel, RandomizedBenchmarkingModel};
    use crate::rng::stream_from_seed;
    use rand::Rng;

    fn t(v: f64) -> Experiment {
        Experiment::new().with_real("t", v)
    }

    #[test]
    fn precession_score_matches_symbolic() {
        let m = PrecessionModel::new();
        let (w, tt) = (0.37, 2.3);
        let s = score(&m, 0, &[w], &t(tt), None).unwrap();
        let exact = -tt * (w * tt / 2.0).tan();
        assert!((s[0] / exact - 1.0).abs() < 1e-4);
        let halved = score(&m, 0, &[w], &t(tt), Some(DEFAULT_STEP / 2.0)).unwrap();
        assert!((halved[0] / s[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn precession_information_is_t_squared() {
        let m = PrecessionModel::new();
        let mut rng = stream_from_seed(11);
        let mut checked = 0;
        while checked < 50 {
            let w: f64 = rng.random();
            let tt: f64 = rng.random::<f64>() * 10.0;
            if (w * tt).sin().abs() < 0.1 {
                continue;
            }
            let fi = fisher_information(&m, &[w], &t(tt)).unwrap();
            assert!((fi[(0, 0)] / (tt * tt) - 1.0).abs() < 1e-4, "w={w} t={tt}");
            checked += 1;
        }
        assert_eq!(fisher_information(&m, &[0.4], &t(0.0)).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn cramer_rao_precession_and_additivity() {
        let m = PrecessionModel::new();
        let exps: Vec<Experiment> = (1..=10).map(|k| t(k as f64)).collect();
        let bound = cramer_rao_bound(&m, &[0.41], &exps).unwrap()[(0, 0)];
        let sum_t2: f64 = (1..=10).map(|k| (k * k) as f64).sum();
        assert!((bound * sum_t2 - 1.0).abs() < 1e-4);
        let doubled: Vec<Experiment> = exps.iter().chain(&exps).cloned().collect();
        let half = cramer_rao_bound(&m, &[0.41], &doubled).unwrap()[(0, 0)];
        assert!((half / bound - 0.5).abs() < 1e-12);
        let total = total_information(&m, &[0.41], &doubled).unwrap();
        let parts = total_information(&m, &[0.41], &exps).unwrap() * 2.0;
        assert!((total - parts).amax() < 1e-9);
    }

    #[test]
    fn single_rb_length_is_unidentifiable() {
        let m = RandomizedBenchmarkingModel::default();
        let e = Experiment::new().with_int("m", 10);
        let fi = fisher_information(&m, &[0.95, 0.3, 0.4], &e).unwrap();
        let eig = fi.clone().symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|l| *l > -1e-10 * eig.amax().max(1.0)));
        assert_eq!(eig.iter().filter(|l| l.abs() > 1e-8 * eig.amax()).count(), 1);
        match cramer_rao_bound(&m, &[0.95, 0.3, 0.4], &[e]) {
            Err(Error::Unidentifiable { null_direction }) => {
                let v = nalgebra::DVector::from_vec(null_direction);
                assert!((&fi * &v).norm() < 1e-6 * fi.amax());
            }
            other => panic!("expected unidentifiable, got {other:?}"),
        }
    }

    #[test]
    fn rb_score_matches_analytic() {
        let m = RandomizedBenchmarkingModel::default();
        let (p, a, b, len): (f64, f64, f64, i32) = (0.93, 0.35, 0.4, 7);
        let surv = a * p.powi(len) + b;
        let s = score(&m, 0, &[p, a, b], &Experiment::new().with_int("m", len as i64), None).unwrap();
        let exact = [a * len as f64 * p.powi(len - 1) / surv, p.powi(len) / surv, 1.0 / surv];
        for i in 0..3 {
            assert!((s[i] / exact[i] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn van_trees_limits() {
        let m = PrecessionModel::new();
        let prior = Distribution::normal_1d(0.5, 0.01).unwrap();
        let mut rng = stream_from_seed(3);
        let pure = van_trees_bound(&m, &prior, &[t(0.0)], 100, &mut rng).unwrap();
        assert!((pure[(0, 0)] - 0.01).abs() < 1e-15);
        let exps: Vec<Experiment> = (1..=5).map(|k| t(k as f64)).collect();
        let vt = van_trees_bound(&m, &prior, &exps, 200, &mut rng).unwrap()[(0, 0)];
        let crb = cramer_rao_bound(&m, &[0.5], &exps).unwrap()[(0, 0)];
        assert!(vt <= crb);
        let doubled: Vec<Experiment> = exps.iter().chain(&exps).cloned().collect();
        assert!(van_trees_bound(&m, &prior, &doubled, 200, &mut rng).unwrap()[(0, 0)] < vt);
        let uniform = Distribution::uniform(vec![[0.0, 1.0]]).unwrap();
        assert!(matches!(van_trees_bound(&m, &uniform, &exps, 10, &mut rng), Err(Error::Unsupported(_))));
    }

    #[test]
    fn bound_trace_reports_singular_prefix() {
        let m = PrecessionModel::new();
        let exps = vec![t(0.0), t(1.0), t(2.0)];
        let tr = bound_trace(&m, &[0.3], &exps).unwrap();
        assert!(tr.cumulative_trace[0].is_none());
        assert!((tr.cumulative_trace[2].unwrap() * 5.0 - 1.0).abs() < 1e-4);
        assert!(matches!(bound_trace(&m, &[0.3], &[t(0.0)]), Err(Error::Unidentifiable { .. })));
    }
}
