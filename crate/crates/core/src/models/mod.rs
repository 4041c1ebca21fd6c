//! Built-in and derived likelihood models, plus construction of model chains
//! from declarative descriptions such as
//! `["binomial", {"n_meas": 25}, ["precession", {}]]`.

pub mod builtin;
pub mod derived;

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

pub use builtin::{
    multicos_likelihood, precession_likelihood, rb_fidelity, rb_likelihood, rebit_likelihood, MultiCosModel,
    PrecessionModel, RandomizedBenchmarkingModel, RebitModel,
};
pub use derived::{
    binomial_log_pmf, perturb_pr0, BinomialModel, PoisonedModel, RandomWalkModel, StepScaling, TemperedModel,
    TimestepKernel,
};

use crate::error::{Error, Result};
use crate::model::Model;

/// A parsed, buildable model chain.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Precession { omega_min: f64, omega_max: f64 },
    MultiCos,
    Rb { dim: u32 },
    Rebit,
    Binomial { n_meas: Option<u64>, underlying: Box<ModelSpec> },
    Tempered { gamma: f64, underlying: Box<ModelSpec> },
    Poisoned { epsilon: f64, seed: u64, underlying: Box<ModelSpec> },
    RandomWalk { kernel: TimestepKernel, underlying: Box<ModelSpec> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PrecessionOpts {
    #[serde(default)]
    omega_min: f64,
    #[serde(default = "one")]
    omega_max: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RbOpts {
    #[serde(default = "two")]
    d: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BinomialOpts {
    n_meas: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemperedOpts {
    gamma: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoisonedOpts {
    epsilon: f64,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RandomWalkOpts {
    std: Option<Vec<f64>>,
    cov: Option<Vec<Vec<f64>>>,
    #[serde(default = "per_update")]
    scaling: String,
    field: Option<String>,
}

fn one() -> f64 {
    1.0
}
fn two() -> u32 {
    2
}
fn per_update() -> String {
    "per-update".into()
}

fn opts<T: DeserializeOwned>(name: &str, v: Option<&Value>) -> Result<T> {
    let v = v.cloned().unwrap_or_else(|| Value::Object(Default::default()));
    serde_json::from_value(v).map_err(|e| Error::config(format!("options for `{name}`: {e}")))
}

impl ModelSpec {
    /// Parses a chain: a bare name, or `[name, {options}?, underlying?]`.
    pub fn from_value(v: &Value) -> Result<Self> {
        let (name, rest): (&str, &[Value]) = match v {
            Value::String(s) => (s.as_str(), &[]),
            Value::Array(items) => match items.split_first() {
                Some((Value::String(s), rest)) => (s.as_str(), rest),
                _ => return Err(Error::config("model chain entry must start with a model name")),
            },
            other => return Err(Error::config(format!("cannot read a model from {other}"))),
        };
        let (options, inner) = match rest {
            [] => (None, None),
            [o @ Value::Object(_)] => (Some(o), None),
            [o @ Value::Object(_), inner] => (Some(o), Some(inner)),
            [inner] => (None, Some(inner)),
            _ => return Err(Error::config(format!("malformed model chain entry for `{name}`"))),
        };
        let underlying = |what: &str| -> Result<Box<ModelSpec>> {
            let inner = inner.ok_or_else(|| Error::config(format!("`{what}` needs an underlying model")))?;
            Ok(Box::new(ModelSpec::from_value(inner)?))
        };
        let leaf = |what: &str| -> Result<()> {
            match inner {
                None => Ok(()),
                Some(_) => Err(Error::config(format!("`{what}` is a base model and takes no underlying model"))),
            }
        };
        let spec = match name {
            "precession" => {
                leaf(name)?;
                let o: PrecessionOpts = opts(name, options)?;
                ModelSpec::Precession { omega_min: o.omega_min, omega_max: o.omega_max }
            }
            "multicos" => {
                leaf(name)?;
                let _: Empty = opts(name, options)?;
                ModelSpec::MultiCos
            }
            "rb" => {
                leaf(name)?;
                let o: RbOpts = opts(name, options)?;
                ModelSpec::Rb { dim: o.d }
            }
            "rebit" => {
                leaf(name)?;
                let _: Empty = opts(name, options)?;
                ModelSpec::Rebit
            }
            "binomial" => {
                let o: BinomialOpts = opts(name, options)?;
                ModelSpec::Binomial { n_meas: o.n_meas, underlying: underlying(name)? }
            }
            "tempered" | "mle" => {
                let o: TemperedOpts = opts(name, options)?;
                ModelSpec::Tempered { gamma: o.gamma, underlying: underlying(name)? }
            }
            "poisoned" => {
                let o: PoisonedOpts = opts(name, options)?;
                ModelSpec::Poisoned { epsilon: o.epsilon, seed: o.seed, underlying: underlying(name)? }
            }
            "randomwalk" | "random-walk" => {
                let o: RandomWalkOpts = opts(name, options)?;
                let scaling = match (o.scaling.as_str(), o.field) {
                    ("per-update", None) => StepScaling::PerUpdate,
                    ("wiener", Some(field)) => StepScaling::Wiener { field },
                    ("linear", Some(field)) => StepScaling::Linear { field },
                    (s, f) => {
                        return Err(Error::config(format!(
                            "random walk scaling `{s}` with field {f:?}; expected per-update, or wiener/linear with a field"
                        )))
                    }
                };
                let kernel = match (o.std, o.cov) {
                    (Some(std), None) => TimestepKernel::diagonal(&std, scaling)?,
                    (None, Some(cov)) => {
                        let d = cov.len();
                        if cov.iter().any(|r| r.len() != d) {
                            return Err(Error::config("random walk covariance must be square"));
                        }
                        TimestepKernel::new(DMatrix::from_fn(d, d, |i, j| cov[i][j]), scaling)?
                    }
                    _ => return Err(Error::config("random walk needs exactly one of `std` or `cov`")),
                };
                ModelSpec::RandomWalk { kernel, underlying: underlying(name)? }
            }
            other => return Err(Error::config(format!("unknown model `{other}`"))),
        };
        Ok(spec)
    }

    pub fn build(&self) -> Result<Arc<dyn Model>> {
        Ok(match self {
            ModelSpec::Precession { omega_min, omega_max } => {
                Arc::new(PrecessionModel::with_bounds(*omega_min, *omega_max)?)
            }
            ModelSpec::MultiCos => Arc::new(MultiCosModel),
            ModelSpec::Rb { dim } => Arc::new(RandomizedBenchmarkingModel::new(*dim)?),
            ModelSpec::Rebit => Arc::new(RebitModel),
            ModelSpec::Binomial { underlying, .. } => Arc::new(BinomialModel::new(underlying.build()?)),
            ModelSpec::Tempered { gamma, underlying } => Arc::new(TemperedModel::new(underlying.build()?, *gamma)?),
            ModelSpec::Poisoned { epsilon, seed, underlying } => {
                Arc::new(PoisonedModel::new(underlying.build()?, *epsilon, *seed)?)
            }
            ModelSpec::RandomWalk { kernel, underlying } => {
                Arc::new(RandomWalkModel::new(underlying.build()?, kernel.clone())?)
            }
        })
    }

    /// Shot count configured on the outermost binomial layer, if any.
    pub fn default_n_meas(&self) -> Option<u64> {
        match self {
            ModelSpec::Binomial { n_meas, underlying } => n_meas.or_else(|| underlying.default_n_meas()),
            ModelSpec::Tempered { underlying, .. }
            | ModelSpec::Poisoned { underlying, .. }
            | ModelSpec::RandomWalk { underlying, .. } => underlying.default_n_meas(),
            _ => None,
        }
    }

    /// Whether the chain contains a binomial layer.
    pub fn is_binomial(&self) -> bool {
        match self {
            ModelSpec::Binomial { .. } => true,
            ModelSpec::Tempered { underlying, .. }
            | ModelSpec::Poisoned { underlying, .. }
            | ModelSpec::RandomWalk { underlying, .. } => underlying.is_binomial(),
            _ => false,
        }
    }

    /// The chain with estimation-only layers (tempering, poisoning) removed:
    /// the model that generates simulated data.
    pub fn data_generating(&self) -> ModelSpec {
        match self {
            ModelSpec::Tempered { underlying, .. } | ModelSpec::Poisoned { underlying, .. } => {
                underlying.data_generating()
            }
            ModelSpec::Binomial { n_meas, underlying } => {
                ModelSpec::Binomial { n_meas: *n_meas, underlying: Box::new(underlying.data_generating()) }
            }
            ModelSpec::RandomWalk { kernel, underlying } => {
                ModelSpec::RandomWalk { kernel: kernel.clone(), underlying: Box::new(underlying.data_generating()) }
            }
            leaf => leaf.clone(),
        }
    }

    /// Name of the base model at the bottom of the chain.
    pub fn base_name(&self) -> &'static str {
        match self {
            ModelSpec::Precession { .. } => "precession",
            ModelSpec::MultiCos => "multicos",
            ModelSpec::Rb { .. } => "rb",
            ModelSpec::Rebit => "rebit",
            ModelSpec::Binomial { underlying, .. }
            | ModelSpec::Tempered { underlying, .. }
            | ModelSpec::Poisoned { underlying, .. }
            | ModelSpec::RandomWalk { underlying, .. } => underlying.base_name(),
        }
    }
}
