//! Risk and Bayes-risk simulation: many independent estimation trials, each
//! with its own random stream, collected into a loss matrix.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::Serialize;

use crate::design::{complete_experiment, HeuristicSpec};
use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::resample::ResamplerConfig;
use crate::rng::{stream_from_seed, substream, RandomStream};
use crate::smc::Updater;

/// Everything a trial needs except its random stream.
#[derive(Clone, Debug)]
pub struct TrialConfig {
    /// Model used for estimation.
    pub model: Arc<dyn Model>,
    /// Model that generates data and evolves the truth; usually `model`
    /// with estimation-only layers removed.
    pub true_model: Arc<dyn Model>,
    pub prior: Distribution,
    pub n_particles: usize,
    pub n_experiments: usize,
    pub heuristic: HeuristicSpec,
    /// Fixed truth (risk). Drawn from the prior per trial when absent
    /// (Bayes risk).
    pub true_params: Option<Vec<f64>>,
    pub resampler: ResamplerConfig,
    pub default_n_meas: Option<u64>,
}

impl TrialConfig {
    pub fn new(model: Arc<dyn Model>, prior: Distribution, n_particles: usize, n_experiments: usize) -> Self {
        TrialConfig {
            true_model: model.clone(),
            model,
            prior,
            n_particles,
            n_experiments,
            heuristic: HeuristicSpec::default(),
            true_params: None,
            resampler: ResamplerConfig::default(),
            default_n_meas: None,
        }
    }
}

#[derive(Debug)]
pub struct TrialOutcome {
    /// Squared error `‖x̂_k − x_k‖²` after each experiment.
    pub loss: Vec<f64>,
    pub true_params: Vec<f64>,
    pub final_estimate: Vec<f64>,
    pub updater: Updater,
}

/// Squared-error loss `‖a − b‖²`.
pub fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn draw_truth(cfg: &TrialConfig, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    let mut x = vec![0.0; cfg.prior.dim()];
    for _ in 0..crate::smc::MAX_INIT_RETRIES {
        cfg.prior.sample_one(&mut x, rng);
        if cfg.true_model.is_valid(&x) {
            return Ok(x);
        }
    }
    Err(Error::Initialization("prior produced no valid true parameters".into()))
}

/// One design → simulate → update loop.
pub fn run_trial(cfg: &TrialConfig, mut rng: RandomStream) -> Result<TrialOutcome> {
    let mut truth = match &cfg.true_params {
        Some(x) => {
            if !cfg.true_model.is_valid(x) {
                return Err(Error::Validity { row: 0, detail: format!("true parameters {x:?} are invalid") });
            }
            x.clone()
        }
        None => draw_truth(cfg, &mut rng)?,
    };
    let updater_stream = stream_from_seed(rng.random());
    let mut updater = Updater::new(cfg.model.clone(), cfg.n_particles, &cfg.prior, cfg.resampler.clone(), updater_stream)?;
    let mut heuristic = cfg.heuristic.build(&updater)?;
    let mut loss = Vec::with_capacity(cfg.n_experiments);
    for _ in 0..cfg.n_experiments {
        let e = complete_experiment(cfg.model.as_ref(), heuristic.next_experiment(&updater, &mut rng)?, cfg.default_n_meas);
        let datum = cfg.true_model.simulate_experiment(&truth, &e, &mut rng)?;
        updater.update(datum, &e)?;
        if cfg.true_model.has_timestep() {
            let row = nalgebra::DMatrix::from_row_slice(1, truth.len(), &truth);
            let moved = cfg.true_model.update_timestep(&row, &e, &mut rng)?;
            truth = moved.row(0).iter().copied().collect();
        }
        loss.push(squared_error(&updater.est_mean(), &truth));
    }
    Ok(TrialOutcome { loss, final_estimate: updater.est_mean(), true_params: truth, updater })
}

/// Loss matrix over trials; failed trials are masked with NaN losses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialMatrix {
    pub n_experiments: usize,
    pub master_seed: u64,
    pub bayes: bool,
    pub loss: Vec<Vec<f64>>,
    pub true_params: Vec<Option<Vec<f64>>>,
    pub estimates: Vec<Option<Vec<f64>>>,
    pub failures: Vec<Option<String>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub reason: String,
}

/// Column statistics of a [`TrialMatrix`].
#[derive(Clone, Debug, Serialize)]
pub struct RiskSummary {
    /// `"bayes"` when truths were drawn from the prior, else `"frequentist"`.
    pub kind: &'static str,
    pub master_seed: u64,
    pub n_trials: usize,
    pub n_failed: usize,
    pub n_experiments: usize,
    pub risk: Vec<f64>,
    pub median: Vec<f64>,
    pub quantile_25: Vec<f64>,
    pub quantile_75: Vec<f64>,
    pub failures: Vec<TrialFailure>,
}

impl TrialMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.loss.len(), self.n_experiments)
    }

    pub fn n_failed(&self) -> usize {
        self.failures.iter().filter(|f| f.is_some()).count()
    }

    fn column(&self, k: usize) -> Vec<f64> {
        self.loss
            .iter()
            .zip(&self.failures)
            .filter(|(_, f)| f.is_none())
            .map(|(row, _)| row[k])
            .collect()
    }

    /// Mean loss per experiment over successful trials.
    pub fn risk(&self) -> Result<Vec<f64>> {
        if self.loss.len() == self.n_failed() {
            return Err(Error::Degenerate("every trial failed; risk is undefined".into()));
        }
        Ok((0..self.n_experiments)
            .map(|k| {
                let c = self.column(k);
                c.iter().sum::<f64>() / c.len() as f64
            })
            .collect())
    }

    /// Per-experiment `q`-quantile of the loss (linear interpolation).
    pub fn quantile(&self, q: f64) -> Vec<f64> {
        (0..self.n_experiments)
            .map(|k| {
                let mut c = self.column(k);
                c.sort_by(f64::total_cmp);
                quantile_sorted(&c, q)
            })
            .collect()
    }

    pub fn summary(&self) -> Result<RiskSummary> {
        Ok(RiskSummary {
            kind: if self.bayes { "bayes" } else { "frequentist" },
            master_seed: self.master_seed,
            n_trials: self.loss.len(),
            n_failed: self.n_failed(),
            n_experiments: self.n_experiments,
            risk: self.risk()?,
            median: self.quantile(0.5),
            quantile_25: self.quantile(0.25),
            quantile_75: self.quantile(0.75),
            failures: self
                .failures
                .iter()
                .enumerate()
                .filter_map(|(trial, f)| f.clone().map(|reason| TrialFailure { trial, reason }))
                .collect(),
        })
    }

    /// Header `loss_0,…,loss_{n-1}`, then one row per trial. Failed rows
    /// hold `NaN`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..self.n_experiments).map(|k| format!("loss_{k}")).collect();
        out.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for row in &self.loss {
            out.write_record(row.iter().map(|v| v.to_string())).map_err(|e| Error::Io(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Runs `n_trials` independent trials. Trial `t` uses sub-stream `t` of
/// `master_seed`, so the result does not depend on `workers`.
pub fn perf_test_multiple(n_trials: usize, cfg: &TrialConfig, master_seed: u64, workers: usize) -> Result<TrialMatrix> {
    if n_trials == 0 {
        return Err(Error::config("perf test needs at least one trial"));
    }
    cfg.heuristic.validate()?;
    let run = |t: usize| run_trial(cfg, substream(master_seed, t as u64));
    let results: Vec<Result<TrialOutcome>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))?;
        pool.install(|| (0..n_trials).into_par_iter().map(run).collect())
    } else {
        (0..n_trials).map(run).collect()
    };
    let mut m = TrialMatrix {
        n_experiments: cfg.n_experiments,
        master_seed,
        bayes: cfg.true_params.is_none(),
        loss: Vec::with_capacity(n_trials),
        true_params: Vec::with_capacity(n_trials),
        estimates: Vec::with_capacity(n_trials),
        failures: Vec::with_capacity(n_trials),
    };
    for (t, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => {
                m.loss.push(o.loss);
                m.true_params.push(Some(o.true_params));
                m.estimates.push(Some(o.final_estimate));
                m.failures.push(None);
            }
            Err(e) => {
                log::warn!("trial {t} failed: {e}");
                m.loss.push(vec![f64::NAN; cfg.n_experiments]);
                m.true_params.push(None);
                m.estimates.push(None);
                m.failures.push(Some(e.to_string()));
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PrecessionModel;

    fn precession_cfg(n_exp: usize) -> TrialConfig {
        TrialConfig::new(
            Arc::new(PrecessionModel::new()),
            Distribution::uniform(vec![[0.0, 1.0]]).unwrap(),
            300,
            n_exp,
        )
    }

    #[test]
    fn zero_experiments_give_empty_loss() {
        let o = run_trial(&precession_cfg(0), stream_from_seed(1)).unwrap();
        assert!(o.loss.is_empty());
    }

    #[test]
    fn single_trial_matches_run_trial() {
        let cfg = precession_cfg(10);
        let m = perf_test_multiple(1, &cfg, 9, 1).unwrap();
        let o = run_trial(&cfg, substream(9, 0)).unwrap();
        assert_eq!(m.loss[0], o.loss);
        assert_eq!(m.risk().unwrap(), o.loss);
    }

    #[test]
    fn serial_and_parallel_agree() {
        let cfg = precession_cfg(15);
        let a = perf_test_multiple(8, &cfg, 5, 1).unwrap();
        let b = perf_test_multiple(8, &cfg, 5, 4).unwrap();
        assert_eq!(a, b);
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn failures_are_masked() {
        let mut cfg = precession_cfg(5);
        cfg.true_params = Some(vec![2.0]);
        let m = perf_test_multiple(3, &cfg, 1, 1).unwrap();
        assert_eq!(m.n_failed(), 3);
        assert!(m.loss.iter().flatten().all(|v| v.is_nan()));
        assert!(m.risk().is_err());
    }

    #[test]
    fn loss_is_outer_product_trace() {
        let a = [0.3, -1.2, 2.0];
        let b = [0.1, 0.4, 1.5];
        let diff = nalgebra::DVector::from_iterator(3, a.iter().zip(&b).map(|(x, y)| x - y));
        let trace = (&diff * diff.transpose()).trace();
        assert!((squared_error(&a, &b) - trace).abs() < 1e-12);
    }

    #[test]
    fn zero_losses_give_zero_risk() {
        let m = TrialMatrix {
            n_experiments: 2,
            master_seed: 0,
            bayes: true,
            loss: vec![vec![0.0, 0.0]; 3],
            true_params: vec![None; 3],
            estimates: vec![None; 3],
            failures: vec![None; 3],
        };
        assert_eq!(m.risk().unwrap(), vec![0.0, 0.0]);
    }
}
