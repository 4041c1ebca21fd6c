//! Command-line front end: `simulate`, `estimate`, `perf`, `bounds` and
//! `region`.
//!
//! Every command reads one TOML run configuration; flags override its
//! values. Outputs are pure functions of the configuration and input files,
//! so repeated runs produce identical bytes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataTable;
use crate::design::{complete_experiment, HeuristicSpec};
use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::estimate::EstimateSummary;
use crate::fisher::{bound_trace, van_trees_bound, BoundTrace, DEFAULT_PRIOR_SAMPLES};
use crate::model::{Experiment, Model};
use crate::models::ModelSpec;
use crate::perf::{perf_test_multiple, RiskSummary, TrialConfig};
use crate::regions::{
    covariance_ellipsoid, credible_set, region_est_ellipsoid, region_est_hull, RegionEstimate, DEFAULT_MVEE_TOL,
};
use crate::resample::ResamplerConfig;
use crate::rng::{substream, RandomStream};
use crate::smc::{ParticleFilter, Updater};
use crate::snapshot::Snapshot;

/// Sub-stream indices derived from the master seed.
pub mod streams {
    /// Truth draw, experiment design and data simulation.
    pub const SIMULATE: u64 = 0;
    /// Estimation updater.
    pub const ESTIMATE: u64 = 1;
    /// Prior sampling for the van Trees bound.
    pub const BOUNDS: u64 = 2;
    /// Perf trials use the master seed directly, one sub-stream per trial.
    pub const PERF_MASTER: &str = "master seed, sub-stream = trial index";
}

#[derive(Parser, Debug)]
#[command(name = "smcinfer", version, about = "Sequential Monte Carlo parameter estimation")]
pub struct Cli {
    /// Raise diagnostic verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only report errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured particle count.
    #[arg(long)]
    pub n_particles: Option<usize>,
    /// Overrides the configured number of experiments.
    #[arg(long)]
    pub n_experiments: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Csv,
    Binary,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate data from the configured true parameters.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Data file to write.
        #[arg(short, long)]
        out: PathBuf,
        /// Manifest file; defaults to `<out>.manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DataFormat::Csv)]
        format: DataFormat,
    },
    /// Run the updater over a data file and write a posterior summary.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Data file (CSV, whitespace-delimited or binary).
        #[arg(short, long)]
        data: PathBuf,
        /// Summary JSON to write.
        #[arg(short, long)]
        out: PathBuf,
        /// Region request, e.g. `alpha=0.95 kind=mvee` (kinds: set, hull, mvee, covariance).
        #[arg(long)]
        region: Option<String>,
        /// Separate file for the region record.
        #[arg(long)]
        region_out: Option<PathBuf>,
        /// Binary posterior snapshot to write.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Likelihood worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run repeated trials and write the loss matrix and risk summary.
    Perf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        /// Number of worker threads for trials.
        #[arg(long)]
        parallel: Option<usize>,
        /// Loss matrix CSV.
        #[arg(long)]
        out_csv: PathBuf,
        /// Risk summary JSON.
        #[arg(long)]
        out_json: PathBuf,
    },
    /// Fisher information and Cramér–Rao / van Trees bounds.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        out: PathBuf,
        /// Also compute the van Trees bound over the prior.
        #[arg(long)]
        van_trees: bool,
    },
    /// Recompute a region from a posterior snapshot.
    Region {
        #[arg(long)]
        snapshot: PathBuf,
        /// Region request, e.g. `alpha=0.9 kind=hull`.
        #[arg(long)]
        region: String,
        #[arg(short, long)]
        out: PathBuf,
    },
}

/// `[perf]` table.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerfSection {
    pub n_trials: Option<usize>,
    pub parallel: Option<usize>,
}

/// `[bounds]` table.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    /// Parameters at which information is evaluated; defaults to
    /// `true_params`.
    pub params: Option<Vec<f64>>,
    /// Explicit experiments; otherwise `n_experiments` from the heuristic.
    pub experiments: Option<Vec<Experiment>>,
    pub van_trees: Option<bool>,
    pub n_prior_samples: Option<usize>,
}

/// The run configuration file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Model chain, e.g. `["binomial", { n_meas = 25 }, "precession"]`.
    pub model: toml::Value,
    pub prior: Distribution,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default)]
    pub n_experiments: Option<usize>,
    pub true_params: Option<Vec<f64>>,
    #[serde(default)]
    pub resampler: ResamplerConfig,
    #[serde(default)]
    pub heuristic: HeuristicSpec,
    /// Likelihood worker count for `estimate`.
    pub workers: Option<usize>,
    /// Histogram bins in estimate summaries (0 disables).
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default)]
    pub perf: PerfSection,
    #[serde(default)]
    pub bounds: BoundsSection,
}

fn default_particles() -> usize {
    2000
}
fn default_bins() -> usize {
    50
}

/// A configuration resolved against flags, with its model built.
pub struct Resolved {
    pub config: RunConfig,
    pub seed: u64,
    pub spec: ModelSpec,
    pub model: Arc<dyn Model>,
    pub true_model: Arc<dyn Model>,
    pub config_sha256: String,
}

impl Resolved {
    pub fn load(common: &Common) -> Result<Self> {
        let raw = std::fs::read(&common.config)
            .map_err(|e| Error::config(format!("{}: cannot read configuration: {e}", common.config.display())))?;
        let text = std::str::from_utf8(&raw)
            .map_err(|_| Error::config(format!("{}: configuration is not UTF-8", common.config.display())))?;
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("{}: {e}", common.config.display())))?;
        if let Some(n) = common.n_particles {
            config.n_particles = n;
        }
        if let Some(n) = common.n_experiments {
            config.n_experiments = Some(n);
        }
        let seed = common.seed.or(config.seed).ok_or_else(|| {
            Error::config(format!("{}: `seed` is required (no wall-clock seeding)", common.config.display()))
        })?;
        let model_json = serde_json::to_value(&config.model).map_err(|e| Error::config(format!("model: {e}")))?;
        let spec = ModelSpec::from_value(&model_json)
            .map_err(|e| Error::config(format!("{}: model: {e}", common.config.display())))?;
        let model = spec.build()?;
        let true_model = spec.data_generating().build()?;
        if config.prior.dim() != model.n_modelparams() {
            return Err(Error::config(format!(
                "{}: prior has {} dimensions but {} has {} parameters",
                common.config.display(),
                config.prior.dim(),
                model.name(),
                model.n_modelparams()
            )));
        }
        config.resampler.validate()?;
        config.heuristic.validate()?;
        Ok(Resolved { seed, spec, model, true_model, config_sha256: hex::encode(Sha256::digest(&raw)), config })
    }

    fn n_experiments(&self) -> Result<usize> {
        self.config.n_experiments.ok_or_else(|| Error::config("`n_experiments` is required for this command"))
    }

    fn new_updater(&self, rng: RandomStream) -> Result<Updater> {
        let u = Updater::new(self.model.clone(), self.config.n_particles, &self.config.prior, self.config.resampler.clone(), rng)?;
        Ok(u.with_workers(self.config.workers.unwrap_or(1)))
    }

    /// The designed experiment sequence (heuristics that ignore the updater
    /// need only a freshly initialized one).
    fn design(&self, n: usize, updater: &Updater, rng: &mut RandomStream) -> Result<Vec<Experiment>> {
        let mut h = self.config.heuristic.build(updater)?;
        (0..n)
            .map(|_| Ok(complete_experiment(self.model.as_ref(), h.next_experiment(updater, rng)?, self.spec.default_n_meas())))
            .collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub seed: u64,
    pub stream: u64,
    pub config_sha256: String,
    pub model: String,
    pub parameters: Vec<String>,
    pub true_params: Vec<f64>,
    /// Truth after the last experiment (differs only for time-dependent
    /// models).
    pub final_true_params: Vec<f64>,
    pub n_rows: usize,
    pub data_file: String,
    pub data_sha256: String,
}

pub fn cmd_simulate(common: &Common, out: &Path, manifest: Option<&Path>, format: DataFormat) -> Result<()> {
    let r = Resolved::load(common)?;
    let n = r.n_experiments()?;
    let mut rng = substream(r.seed, streams::SIMULATE);
    let truth = match &r.config.true_params {
        Some(x) => {
            if x.len() != r.true_model.n_modelparams() || !r.true_model.is_valid(x) {
                return Err(Error::config(format!("true_params {x:?} are not valid for {}", r.true_model.name())));
            }
            x.clone()
        }
        None => {
            let mut x = vec![0.0; r.config.prior.dim()];
            let mut tries = 0;
            loop {
                r.config.prior.sample_one(&mut x, &mut rng);
                if r.true_model.is_valid(&x) {
                    break x;
                }
                tries += 1;
                if tries > crate::smc::MAX_INIT_RETRIES {
                    return Err(Error::Initialization("prior produced no valid true parameters".into()));
                }
            }
        }
    };
    // the heuristic sees a fresh updater drawn from its own stream
    let updater = r.new_updater(substream(r.seed, streams::ESTIMATE))?;
    let experiments = r.design(n, &updater, &mut rng)?;
    let mut current = truth.clone();
    let mut rows = Vec::with_capacity(n);
    for e in experiments {
        let d = r.true_model.simulate_experiment(&current, &e, &mut rng)?;
        if r.true_model.has_timestep() {
            let m = nalgebra::DMatrix::from_row_slice(1, current.len(), &current);
            current = r.true_model.update_timestep(&m, &e, &mut rng)?.row(0).iter().copied().collect();
        }
        rows.push((d, e));
    }
    let table = DataTable { rows };
    let mut bytes = Vec::new();
    match format {
        DataFormat::Csv => table.write_csv(&mut bytes, r.model.as_ref())?,
        DataFormat::Binary => table.write_binary(&mut bytes, r.model.as_ref())?,
    }
    write_file(out, &bytes)?;
    let manifest_path = manifest.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".manifest.json");
        PathBuf::from(p)
    });
    write_json(
        &manifest_path,
        &Manifest {
            command: "simulate",
            seed: r.seed,
            stream: streams::SIMULATE,
            config_sha256: r.config_sha256.clone(),
            model: r.true_model.name(),
            parameters: r.true_model.modelparam_names(),
            true_params: truth,
            final_true_params: current,
            n_rows: table.len(),
            data_file: out.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            data_sha256: hex::encode(Sha256::digest(&bytes)),
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegionKind {
    Set,
    Hull,
    Mvee,
    Covariance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionRequest {
    pub kind: RegionKind,
    pub alpha: f64,
    /// Covariance-ellipsoid scale.
    pub scale: f64,
    pub tol: f64,
}

impl RegionRequest {
    /// Parses `key=value` pairs separated by spaces or commas.
    pub fn parse(s: &str) -> Result<Self> {
        let mut req = RegionRequest { kind: RegionKind::Hull, alpha: 0.95, scale: 1.0, tol: DEFAULT_MVEE_TOL };
        for part in s.split(|c: char| c == ',' || c.is_whitespace()).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("region option `{part}` is not key=value")))?;
            let num = || v.parse::<f64>().map_err(|_| Error::config(format!("region option {k}: `{v}` is not a number")));
            match k {
                "alpha" => req.alpha = num()?,
                "scale" => req.scale = num()?,
                "tol" => req.tol = num()?,
                "kind" => {
                    req.kind = match v {
                        "set" | "particles" => RegionKind::Set,
                        "hull" => RegionKind::Hull,
                        "mvee" | "ellipsoid" => RegionKind::Mvee,
                        "covariance" | "cov" => RegionKind::Covariance,
                        other => return Err(Error::config(format!("unknown region kind `{other}`"))),
                    }
                }
                other => return Err(Error::config(format!("unknown region option `{other}`"))),
            }
        }
        if !(req.alpha > 0.0 && req.alpha <= 1.0) {
            return Err(Error::config(format!("region alpha {} must lie in (0, 1]", req.alpha)));
        }
        Ok(req)
    }

    pub fn compute(&self, filter: &ParticleFilter) -> Result<RegionEstimate> {
        Ok(match self.kind {
            RegionKind::Set => RegionEstimate::ParticleSet { alpha: self.alpha, indices: credible_set(filter, self.alpha)? },
            RegionKind::Hull => RegionEstimate::ConvexHull { alpha: self.alpha, hull: region_est_hull(filter, self.alpha)? },
            RegionKind::Mvee => RegionEstimate::Ellipsoid {
                alpha: Some(self.alpha),
                scale: None,
                ellipsoid: region_est_ellipsoid(filter, self.alpha, self.tol)?,
            },
            RegionKind::Covariance => RegionEstimate::Ellipsoid {
                alpha: None,
                scale: Some(self.scale),
                ellipsoid: covariance_ellipsoid(filter, self.scale)?,
            },
        })
    }
}

#[derive(Serialize)]
pub struct EstimateOutput {
    #[serde(flatten)]
    pub summary: EstimateSummary,
    pub seed: u64,
    pub stream: u64,
    pub config_sha256: String,
    pub data_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionEstimate>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_estimate(
    common: &Common,
    data: &Path,
    out: &Path,
    region: Option<&str>,
    region_out: Option<&Path>,
    snapshot: Option<&Path>,
    workers: Option<usize>,
) -> Result<()> {
    let mut r = Resolved::load(common)?;
    if workers.is_some() {
        r.config.workers = workers;
    }
    let request = region.map(RegionRequest::parse).transpose()?;
    let table = DataTable::read_path(data, r.model.as_ref())?;
    let data_bytes = std::fs::read(data)?;
    let mut u = r.new_updater(substream(r.seed, streams::ESTIMATE))?;
    for (i, (d, e)) in table.rows.iter().enumerate() {
        u.update(*d, e).map_err(|err| match err {
            Error::ZeroEvidence { datum } => Error::ZeroEvidence { datum: format!("{datum} (data row {})", i + 1) },
            other => other,
        })?;
    }
    let region = request.map(|q| q.compute(u.filter())).transpose()?;
    if let (Some(path), Some(reg)) = (region_out, &region) {
        write_json(path, reg)?;
    }
    if let Some(path) = snapshot {
        write_file(path, &Snapshot::capture(&u).to_bytes())?;
    }
    let summary = EstimateSummary::from_updater(&u).with_histograms(&u, r.config.histogram_bins);
    write_json(
        out,
        &EstimateOutput {
            summary,
            seed: r.seed,
            stream: streams::ESTIMATE,
            config_sha256: r.config_sha256,
            data_sha256: hex::encode(Sha256::digest(&data_bytes)),
            region,
        },
    )
}

#[derive(Serialize)]
pub struct PerfOutput {
    #[serde(flatten)]
    pub risk: RiskSummary,
    pub seed_lineage: &'static str,
    pub config_sha256: String,
}

pub fn cmd_perf(common: &Common, trials: Option<usize>, parallel: Option<usize>, out_csv: &Path, out_json: &Path) -> Result<()> {
    let r = Resolved::load(common)?;
    let n_trials = trials.or(r.config.perf.n_trials).unwrap_or(100);
    let workers = parallel.or(r.config.perf.parallel).unwrap_or(1);
    let cfg = TrialConfig {
        model: r.model.clone(),
        true_model: r.true_model.clone(),
        prior: r.config.prior.clone(),
        n_particles: r.config.n_particles,
        n_experiments: r.n_experiments()?,
        heuristic: r.config.heuristic.clone(),
        true_params: r.config.true_params.clone(),
        resampler: r.config.resampler.clone(),
        default_n_meas: r.spec.default_n_meas(),
    };
    let m = perf_test_multiple(n_trials, &cfg, r.seed, workers)?;
    let mut csv_bytes = Vec::new();
    m.write_csv(&mut csv_bytes)?;
    write_file(out_csv, &csv_bytes)?;
    write_json(
        out_json,
        &PerfOutput { risk: m.summary()?, seed_lineage: streams::PERF_MASTER, config_sha256: r.config_sha256 },
    )
}

#[derive(Serialize)]
pub struct BoundsOutput {
    pub model: String,
    pub params: Vec<f64>,
    pub experiments: Vec<Experiment>,
    #[serde(flatten)]
    pub trace: BoundTrace,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub van_trees: Option<Vec<Vec<f64>>>,
    pub seed: u64,
    pub config_sha256: String,
}

pub fn cmd_bounds(common: &Common, out: &Path, van_trees: bool) -> Result<()> {
    let r = Resolved::load(common)?;
    let params = r
        .config
        .bounds
        .params
        .clone()
        .or_else(|| r.config.true_params.clone())
        .ok_or_else(|| Error::config("bounds need `[bounds] params` or `true_params`"))?;
    let experiments = match &r.config.bounds.experiments {
        Some(list) => list
            .iter()
            .map(|e| complete_experiment(r.model.as_ref(), e.clone(), r.spec.default_n_meas()))
            .collect(),
        None => {
            let updater = r.new_updater(substream(r.seed, streams::ESTIMATE))?;
            r.design(r.n_experiments()?, &updater, &mut substream(r.seed, streams::SIMULATE))?
        }
    };
    let trace = bound_trace(r.model.as_ref(), &params, &experiments)?;
    let van_trees = if van_trees || r.config.bounds.van_trees.unwrap_or(false) {
        let n = r.config.bounds.n_prior_samples.unwrap_or(DEFAULT_PRIOR_SAMPLES);
        let b = van_trees_bound(r.model.as_ref(), &r.config.prior, &experiments, n, &mut substream(r.seed, streams::BOUNDS))?;
        Some(b.row_iter().map(|row| row.iter().copied().collect()).collect())
    } else {
        None
    };
    write_json(
        out,
        &BoundsOutput {
            model: r.model.name(),
            params,
            experiments,
            trace,
            van_trees,
            seed: r.seed,
            config_sha256: r.config_sha256,
        },
    )
}

pub fn cmd_region(snapshot: &Path, region: &str, out: &Path) -> Result<()> {
    let request = RegionRequest::parse(region)?;
    let bytes = std::fs::read(snapshot).map_err(|e| Error::Io(format!("{}: {e}", snapshot.display())))?;
    let snap = Snapshot::from_bytes(&bytes)?;
    write_json(out, &request.compute(&snap.filter)?)
}

impl Cli {
    /// Log level implied by `-v`/`-q`; the environment is never consulted.
    pub fn log_level(&self) -> log::LevelFilter {
        if self.quiet {
            return log::LevelFilter::Error;
        }
        match self.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            2 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    }
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, out, manifest, format } => cmd_simulate(&common, &out, manifest.as_deref(), format),
        Command::Estimate { common, data, out, region, region_out, snapshot, workers } => cmd_estimate(
            &common,
            &data,
            &out,
            region.as_deref(),
            region_out.as_deref(),
            snapshot.as_deref(),
            workers,
        ),
        Command::Perf { common, trials, parallel, out_csv, out_json } => {
            cmd_perf(&common, trials, parallel, &out_csv, &out_json)
        }
        Command::Bounds { common, out, van_trees } => cmd_bounds(&common, &out, van_trees),
        Command::Region { snapshot, region, out } => cmd_region(&snapshot, &region, &out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_request_parsing() {
        let r = RegionRequest::parse("alpha=0.95 kind=mvee").unwrap();
        assert_eq!(r.kind, RegionKind::Mvee);
        assert_eq!(r.alpha, 0.95);
        let r = RegionRequest::parse("kind=covariance,scale=2").unwrap();
        assert_eq!((r.kind, r.scale), (RegionKind::Covariance, 2.0));
        assert!(RegionRequest::parse("alpha=1.5").is_err());
        assert!(RegionRequest::parse("kind=blob").is_err());
        assert!(RegionRequest::parse("alpha").is_err());
    }

    #[test]
    fn config_parses_mixed_model_array() {
        let text = r#"
            seed = 7
            n_experiments = 10
            model = ["binomial", { n_meas = 25 }, "precession"]
            [prior]
            kind = "uniform"
            bounds = [[0.0, 1.0]]
            [heuristic]
            kind = "linear-grid"
            start = 0.1
            stop = 20.0
            count = 20
        "#;
        let c: RunConfig = toml::from_str(text).unwrap();
        let spec = ModelSpec::from_value(&serde_json::to_value(&c.model).unwrap()).unwrap();
        assert_eq!(spec.default_n_meas(), Some(25));
        assert_eq!(c.n_particles, 2000);
    }
}
