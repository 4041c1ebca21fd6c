//! Experiment-design heuristics.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Experiment, FieldKind, FieldValue, Model};
use crate::smc::Updater;

/// Produces the next experiment to perform.
pub trait Heuristic: Send {
    fn next_experiment(&mut self, updater: &Updater, rng: &mut dyn RngCore) -> Result<Experiment>;
}

fn default_a() -> f64 {
    1.0
}
fn default_b() -> f64 {
    9.0 / 8.0
}
fn default_t() -> String {
    "t".into()
}
fn default_axis() -> String {
    "axis".into()
}

/// Declarative heuristic description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HeuristicSpec {
    /// `t_k = a · b^k`.
    ExpSparse {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_b")]
        b: f64,
        #[serde(default = "default_t")]
        field: String,
        shots: Option<u64>,
    },
    /// `count` evenly spaced values from `start` to `stop` inclusive.
    /// Integer fields are truncated.
    LinearGrid {
        start: f64,
        stop: f64,
        count: usize,
        field: Option<String>,
        shots: Option<u64>,
    },
    /// Measurement axes at angles `πj / n_axes`, cycled; `n_axes = 0` draws
    /// a uniformly random angle each time.
    RandomAxis {
        #[serde(default)]
        n_axes: usize,
        #[serde(default = "default_axis")]
        field: String,
        shots: Option<u64>,
    },
}

impl Default for HeuristicSpec {
    fn default() -> Self {
        HeuristicSpec::ExpSparse { a: 1.0, b: 9.0 / 8.0, field: default_t(), shots: None }
    }
}

impl HeuristicSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            HeuristicSpec::ExpSparse { a, b, .. } => {
                if !(*b > 1.0 && *a > 0.0 && a.is_finite() && b.is_finite()) {
                    return Err(Error::config(format!("exp-sparse needs a > 0 and b > 1, got a = {a}, b = {b}")));
                }
            }
            HeuristicSpec::LinearGrid { start, stop, count, .. } => {
                if *count == 0 || !start.is_finite() || !stop.is_finite() {
                    return Err(Error::config("linear-grid needs finite endpoints and count ≥ 1"));
                }
            }
            HeuristicSpec::RandomAxis { .. } => {}
        }
        Ok(())
    }

    /// Instantiates the heuristic for `updater`'s model.
    pub fn build(&self, updater: &Updater) -> Result<Box<dyn Heuristic>> {
        self.validate()?;
        let model = updater.model().as_ref();
        Ok(match self.clone() {
            HeuristicSpec::ExpSparse { a, b, field, shots } => {
                field_kind(model, &field)?;
                Box::new(ExpSparse { a, b, k: 0, field, shots })
            }
            HeuristicSpec::LinearGrid { start, stop, count, field, shots } => {
                let field = match field {
                    Some(f) => f,
                    None => first_scalar_field(model)?,
                };
                let integer = field_kind(model, &field)? == FieldKind::Int;
                Box::new(LinearGrid { start, stop, count, next: 0, field, integer, shots })
            }
            HeuristicSpec::RandomAxis { n_axes, field, shots } => {
                if field_kind(model, &field)? != FieldKind::Vector(2) {
                    return Err(Error::config(format!("random-axis needs a 2-vector field `{field}`")));
                }
                Box::new(RandomAxis { n_axes, k: 0, field, shots })
            }
        })
    }
}

fn field_kind(model: &dyn Model, name: &str) -> Result<FieldKind> {
    model
        .expparams_fields()
        .into_iter()
        .find(|f| f.name == name)
        .map(|f| f.kind)
        .ok_or_else(|| Error::config(format!("{} has no experiment field `{name}`", model.name())))
}

fn first_scalar_field(model: &dyn Model) -> Result<String> {
    model
        .expparams_fields()
        .into_iter()
        .find(|f| !matches!(f.kind, FieldKind::Vector(_)) && f.name != "n_meas")
        .map(|f| f.name)
        .ok_or_else(|| Error::config(format!("{} has no scalar experiment field to sweep", model.name())))
}

fn with_shots(e: Experiment, shots: Option<u64>) -> Experiment {
    match shots {
        Some(n) => e.with_int("n_meas", n as i64),
        None => e,
    }
}

#[derive(Debug, Clone)]
pub struct ExpSparse {
    a: f64,
    b: f64,
    k: i32,
    field: String,
    shots: Option<u64>,
}

impl ExpSparse {
    pub fn new(a: f64, b: f64) -> Self {
        ExpSparse { a, b, k: 0, field: default_t(), shots: None }
    }
}

impl Heuristic for ExpSparse {
    fn next_experiment(&mut self, _updater: &Updater, _rng: &mut dyn RngCore) -> Result<Experiment> {
        let t = self.a * self.b.powi(self.k);
        self.k += 1;
        Ok(with_shots(Experiment::new().with_real(&self.field, t), self.shots))
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrid {
    start: f64,
    stop: f64,
    count: usize,
    next: usize,
    field: String,
    integer: bool,
    shots: Option<u64>,
}

impl LinearGrid {
    /// The `i`-th grid value, `start + i·(stop − start)/(count − 1)`.
    pub fn value(start: f64, stop: f64, count: usize, i: usize) -> f64 {
        if count == 1 {
            return start;
        }
        if i + 1 == count {
            return stop;
        }
        start + (stop - start) * i as f64 / (count - 1) as f64
    }
}

impl Heuristic for LinearGrid {
    fn next_experiment(&mut self, _updater: &Updater, _rng: &mut dyn RngCore) -> Result<Experiment> {
        if self.next >= self.count {
            return Err(Error::Exhausted(self.count));
        }
        let v = Self::value(self.start, self.stop, self.count, self.next);
        self.next += 1;
        let value = if self.integer { FieldValue::Int(v.trunc() as i64) } else { FieldValue::Real(v) };
        Ok(with_shots(Experiment::new().with(&self.field, value), self.shots))
    }
}

#[derive(Debug, Clone)]
pub struct RandomAxis {
    n_axes: usize,
    k: usize,
    field: String,
    shots: Option<u64>,
}

impl Heuristic for RandomAxis {
    fn next_experiment(&mut self, _updater: &Updater, rng: &mut dyn RngCore) -> Result<Experiment> {
        let theta = if self.n_axes == 0 {
            rng.random::<f64>() * std::f64::consts::PI
        } else {
            std::f64::consts::PI * (self.k % self.n_axes) as f64 / self.n_axes as f64
        };
        self.k += 1;
        let axis = vec![theta.cos(), theta.sin()];
        Ok(with_shots(Experiment::new().with_vector(&self.field, axis), self.shots))
    }
}

/// Fills an `n_meas` field the heuristic left unset.
pub fn complete_experiment(model: &dyn Model, mut e: Experiment, default_n_meas: Option<u64>) -> Experiment {
    if e.get("n_meas").is_none() && model.expparams_fields().iter().any(|f| f.name == "n_meas") {
        if let Some(n) = default_n_meas {
            e.set("n_meas", FieldValue::Int(n as i64));
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Distribution;
    use crate::models::{ModelSpec, PrecessionModel};
    use crate::resample::ResamplerConfig;
    use crate::rng::stream_from_seed;
    use std::sync::Arc;

    fn updater(model: Arc<dyn Model>, prior: Distribution) -> Updater {
        Updater::new(model, 10, &prior, ResamplerConfig::default(), stream_from_seed(0)).unwrap()
    }

    #[test]
    fn exp_sparse_sequence() {
        let u = updater(Arc::new(PrecessionModel::new()), Distribution::uniform(vec![[0.0, 1.0]]).unwrap());
        let mut h = HeuristicSpec::default().build(&u).unwrap();
        let mut rng = stream_from_seed(1);
        let ts: Vec<f64> = (0..3).map(|_| h.next_experiment(&u, &mut rng).unwrap().real("t").unwrap()).collect();
        assert_eq!(ts, vec![1.0, 1.125, 1.265625]);
    }

    #[test]
    fn linear_grid_endpoints_and_exhaustion() {
        let u = updater(Arc::new(PrecessionModel::new()), Distribution::uniform(vec![[0.0, 1.0]]).unwrap());
        let spec = HeuristicSpec::LinearGrid { start: 0.1, stop: 20.0, count: 20, field: None, shots: None };
        let mut h = spec.build(&u).unwrap();
        let mut rng = stream_from_seed(1);
        let ts: Vec<f64> = (0..20).map(|_| h.next_experiment(&u, &mut rng).unwrap().real("t").unwrap()).collect();
        assert_eq!(ts[0], 0.1);
        assert_eq!(ts[19], 20.0);
        assert!(matches!(h.next_experiment(&u, &mut rng), Err(Error::Exhausted(20))));
    }

    #[test]
    fn integer_grid_truncates() {
        let model = ModelSpec::from_value(&serde_json::json!(["binomial", "rb"])).unwrap().build().unwrap();
        let prior = Distribution::uniform(vec![[0.8, 1.0], [0.0, 0.5], [0.0, 0.5]]).unwrap();
        let u = updater(model, prior);
        let spec = HeuristicSpec::LinearGrid { start: 1.0, stop: 800.0, count: 201, field: None, shots: Some(25) };
        let mut h = spec.build(&u).unwrap();
        let mut rng = stream_from_seed(1);
        let e0 = h.next_experiment(&u, &mut rng).unwrap();
        let e1 = h.next_experiment(&u, &mut rng).unwrap();
        assert_eq!(e0.int("m").unwrap(), 1);
        assert_eq!(e1.int("m").unwrap(), 4);
        assert_eq!(e1.int("n_meas").unwrap(), 25);
    }

    #[test]
    fn rejects_bad_parameters() {
        let u = updater(Arc::new(PrecessionModel::new()), Distribution::uniform(vec![[0.0, 1.0]]).unwrap());
        let bad = HeuristicSpec::ExpSparse { a: 1.0, b: 1.0, field: "t".into(), shots: None };
        assert!(bad.build(&u).is_err());
        let missing = HeuristicSpec::RandomAxis { n_axes: 2, field: "axis".into(), shots: None };
        assert!(missing.build(&u).is_err());
    }
}
