//! The estimation-problem contract shared by every likelihood model.
//!
//! Likelihoods are evaluated in batch: a list of outcomes, a matrix of
//! parameter rows (one per particle) and a list of experiments produce a
//! dense `[outcome × particle × experiment]` tensor. A single evaluation is
//! the 1×1×1 case.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Outcome index, or success count for binomial-derived models.
pub type Outcome = usize;

/// One value of an experiment field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Int(i64),
    Real(f64),
    Vector(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Real,
    Int,
    /// Fixed-length real vector.
    Vector(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
}

impl FieldSpec {
    pub fn new(name: &str, kind: FieldKind) -> Self {
        FieldSpec { name: name.to_string(), kind }
    }

    /// Number of scalar columns the field occupies when flattened.
    pub fn width(&self) -> usize {
        match self.kind {
            FieldKind::Real | FieldKind::Int => 1,
            FieldKind::Vector(n) => n,
        }
    }
}

/// Ordered, named experiment parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Experiment {
    fields: Vec<(String, FieldValue)>,
}

impl Experiment {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a field, keeping first-insertion order.
    pub fn with(mut self, name: &str, value: FieldValue) -> Self {
        self.set(name, value);
        self
    }

    pub fn with_real(self, name: &str, v: f64) -> Self {
        self.with(name, FieldValue::Real(v))
    }

    pub fn with_int(self, name: &str, v: i64) -> Self {
        self.with(name, FieldValue::Int(v))
    }

    pub fn with_vector(self, name: &str, v: Vec<f64>) -> Self {
        self.with(name, FieldValue::Vector(v))
    }

    pub fn set(&mut self, name: &str, value: FieldValue) {
        match self.fields.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v = value,
            None => self.fields.push((name.to_string(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&FieldValue> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn fields(&self) -> impl Iterator<Item = (&str, &FieldValue)> {
        self.fields.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn real(&self, name: &str) -> Result<f64> {
        match self.get(name) {
            Some(FieldValue::Real(v)) => Ok(*v),
            Some(FieldValue::Int(v)) => Ok(*v as f64),
            Some(FieldValue::Vector(_)) => Err(Error::config(format!("field `{name}` must be a scalar"))),
            None => Err(missing(name)),
        }
    }

    pub fn int(&self, name: &str) -> Result<i64> {
        match self.get(name) {
            Some(FieldValue::Int(v)) => Ok(*v),
            Some(FieldValue::Real(v)) if v.fract() == 0.0 && v.is_finite() => Ok(*v as i64),
            Some(_) => Err(Error::config(format!("field `{name}` must be an integer"))),
            None => Err(missing(name)),
        }
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<&[f64]> {
        match self.get(name) {
            Some(FieldValue::Vector(v)) if v.len() == len => Ok(v),
            Some(_) => Err(Error::config(format!("field `{name}` must be a {len}-vector"))),
            None => Err(missing(name)),
        }
    }

    /// Builds an experiment from flattened scalar columns in `specs` order.
    pub fn from_flat(specs: &[FieldSpec], values: &[f64]) -> Result<Self> {
        let width: usize = specs.iter().map(FieldSpec::width).sum();
        if values.len() != width {
            return Err(Error::config(format!(
                "experiment needs {width} values, got {}",
                values.len()
            )));
        }
        let mut e = Experiment::new();
        let mut offset = 0;
        for spec in specs {
            let value = match spec.kind {
                FieldKind::Real => FieldValue::Real(values[offset]),
                FieldKind::Int => FieldValue::Int(values[offset] as i64),
                FieldKind::Vector(n) => FieldValue::Vector(values[offset..offset + n].to_vec()),
            };
            offset += spec.width();
            e.set(&spec.name, value);
        }
        Ok(e)
    }

    /// Flattens the fields named in `specs`, in that order.
    pub fn to_flat(&self, specs: &[FieldSpec]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for spec in specs {
            match spec.kind {
                FieldKind::Real => out.push(self.real(&spec.name)?),
                FieldKind::Int => out.push(self.int(&spec.name)? as f64),
                FieldKind::Vector(n) => out.extend_from_slice(self.vector(&spec.name, n)?),
            }
        }
        Ok(out)
    }
}

fn missing(name: &str) -> Error {
    Error::config(format!("experiment is missing field `{name}`"))
}

impl Serialize for Experiment {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.fields.len()))?;
        for (k, v) in &self.fields {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Experiment {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct ExpVisitor;
        impl<'de> Visitor<'de> for ExpVisitor {
            type Value = Experiment;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of experiment fields")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Experiment, A::Error> {
                let mut e = Experiment::new();
                while let Some((k, v)) = map.next_entry::<String, FieldValue>()? {
                    e.set(&k, v);
                }
                Ok(e)
            }
        }
        d.deserialize_map(ExpVisitor)
    }
}

/// Dense likelihood tensor indexed `(outcome, particle, experiment)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Likelihoods {
    n_outcomes: usize,
    n_particles: usize,
    n_experiments: usize,
    data: Vec<f64>,
}

impl Likelihoods {
    pub fn zeros(n_outcomes: usize, n_particles: usize, n_experiments: usize) -> Self {
        Likelihoods {
            n_outcomes,
            n_particles,
            n_experiments,
            data: vec![0.0; n_outcomes * n_particles * n_experiments],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_outcomes, self.n_particles, self.n_experiments)
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n_particles + j) * self.n_experiments + k
    }

    #[inline]
    pub fn get(&self, outcome: usize, particle: usize, experiment: usize) -> f64 {
        self.data[self.index(outcome, particle, experiment)]
    }

    #[inline]
    pub fn set(&mut self, outcome: usize, particle: usize, experiment: usize, value: f64) {
        let idx = self.index(outcome, particle, experiment);
        self.data[idx] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Per-particle values for one outcome and one experiment.
    pub fn column(&self, outcome: usize, experiment: usize) -> Vec<f64> {
        (0..self.n_particles).map(|j| self.get(outcome, j, experiment)).collect()
    }
}

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// Clamps probabilities into `[0, 1]`, warning (once per process) when a
/// value overshoots by more than `1e-8`.
pub fn clamp_probabilities(values: &mut [f64], context: &str) {
    let mut worst: f64 = 0.0;
    for v in values.iter_mut() {
        if *v < 0.0 || *v > 1.0 {
            worst = worst.max(if *v < 0.0 { -*v } else { *v - 1.0 });
            *v = v.clamp(0.0, 1.0);
        }
    }
    if worst > 1e-8 && !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("{context}: probability outside [0,1] by {worst:e}; clamped");
    }
}

/// Likelihood tensor for the requested outcomes of a two-outcome model, given
/// `pr0[particle, experiment] = Pr(0 | x; e)`. Outcomes other than 0 and 1
/// have probability zero.
pub fn pr0_to_likelihoods(outcomes: &[Outcome], pr0: &DMatrix<f64>) -> Result<Likelihoods> {
    if let Some(bad) = pr0.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::NumericDomain(format!("probability {bad} outside [0, 1]")));
    }
    let (np, ne) = pr0.shape();
    let mut out = Likelihoods::zeros(outcomes.len(), np, ne);
    for (i, &o) in outcomes.iter().enumerate() {
        for j in 0..np {
            for k in 0..ne {
                let p = pr0[(j, k)];
                let v = match o {
                    0 => p,
                    1 => 1.0 - p,
                    _ => 0.0,
                };
                out.set(i, j, k, v);
            }
        }
    }
    Ok(out)
}

/// Full `[2 × n_p × n_e]` tensor for both outcomes.
pub fn pr0_to_likelihood_tensor(pr0: &DMatrix<f64>) -> Result<Likelihoods> {
    pr0_to_likelihoods(&[0, 1], pr0)
}

/// The likelihood, validity and simulation contract every estimation problem
/// implements.
pub trait Model: Send + Sync + fmt::Debug {
    /// Short identifier used in configs and manifests.
    fn name(&self) -> String;

    fn n_modelparams(&self) -> usize;

    fn modelparam_names(&self) -> Vec<String>;

    /// Experiment record layout, in order.
    fn expparams_fields(&self) -> Vec<FieldSpec>;

    fn n_outcomes(&self, experiment: &Experiment) -> Result<usize>;

    fn is_valid(&self, x: &[f64]) -> bool;

    fn are_models_valid(&self, params: &DMatrix<f64>) -> Vec<bool> {
        let mut row = vec![0.0; params.ncols()];
        (0..params.nrows())
            .map(|i| {
                copy_row(params, i, &mut row);
                self.is_valid(&row)
            })
            .collect()
    }

    /// Moves `x` onto the nearest point of the validity region. Models whose
    /// region is unbounded leave `x` untouched.
    fn clip_to_valid(&self, _x: &mut [f64]) {}

    /// Likelihood without the parameter-validity check. Used where rows are
    /// known valid, and by numerical differentiation, which probes just
    /// outside the region.
    fn likelihood_unchecked(
        &self,
        outcomes: &[Outcome],
        params: &DMatrix<f64>,
        experiments: &[Experiment],
    ) -> Result<Likelihoods>;

    fn likelihood(
        &self,
        outcomes: &[Outcome],
        params: &DMatrix<f64>,
        experiments: &[Experiment],
    ) -> Result<Likelihoods> {
        check_params(self, params)?;
        self.likelihood_unchecked(outcomes, params, experiments)
    }

    /// Draws one outcome from `Pr(· | x; e)`.
    fn simulate_experiment(
        &self,
        true_params: &[f64],
        experiment: &Experiment,
        rng: &mut dyn RngCore,
    ) -> Result<Outcome> {
        let n = self.n_outcomes(experiment)?;
        let params = DMatrix::from_row_slice(1, true_params.len(), true_params);
        let outcomes: Vec<Outcome> = (0..n).collect();
        let l = self.likelihood(&outcomes, &params, std::slice::from_ref(experiment))?;
        Ok(sample_categorical((0..n).map(|i| l.get(i, 0, 0)), rng))
    }

    /// Whether [`Model::update_timestep`] moves particles.
    fn has_timestep(&self) -> bool {
        false
    }

    /// Moves every parameter row forward by one time step.
    fn update_timestep(
        &self,
        params: &DMatrix<f64>,
        _experiment: &Experiment,
        _rng: &mut dyn RngCore,
    ) -> Result<DMatrix<f64>> {
        Ok(params.clone())
    }

    /// The model directly below this one in a chain.
    fn underlying(&self) -> Option<&dyn Model> {
        None
    }
}

/// Follows `underlying` links to the bottom of a model chain.
pub fn base_model(model: &dyn Model) -> &dyn Model {
    let mut m = model;
    while let Some(u) = m.underlying() {
        m = u;
    }
    m
}

/// Number of models in the chain, including `model` itself.
pub fn chain_depth(model: &dyn Model) -> usize {
    let mut depth = 1;
    let mut m = model;
    while let Some(u) = m.underlying() {
        depth += 1;
        m = u;
    }
    depth
}

/// Validity error for the first invalid row of `params`.
pub fn check_params<M: Model + ?Sized>(model: &M, params: &DMatrix<f64>) -> Result<()> {
    if params.ncols() != model.n_modelparams() {
        return Err(Error::config(format!(
            "{} expects {} model parameters, got {}",
            model.name(),
            model.n_modelparams(),
            params.ncols()
        )));
    }
    if let Some(row) = model.are_models_valid(params).iter().position(|ok| !ok) {
        let values: Vec<f64> = params.row(row).iter().copied().collect();
        return Err(Error::Validity {
            row,
            detail: format!("{values:?} is not a valid assignment for {}", model.name()),
        });
    }
    Ok(())
}

pub(crate) fn copy_row(m: &DMatrix<f64>, i: usize, out: &mut [f64]) {
    for (j, v) in out.iter_mut().enumerate() {
        *v = m[(i, j)];
    }
}

/// Index drawn with probability proportional to `probs`.
pub fn sample_categorical(probs: impl Iterator<Item = f64> + Clone, rng: &mut dyn RngCore) -> usize {
    let total: f64 = probs.clone().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_nonzero
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pr0_tensor_complements() {
        let l = pr0_to_likelihood_tensor(&DMatrix::from_element(1, 1, 0.3)).unwrap();
        assert_eq!(l.get(0, 0, 0), 0.3);
        assert_eq!(l.get(1, 0, 0), 0.7);

        let l = pr0_to_likelihood_tensor(&DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        assert_eq!(l.column(0, 0), vec![0.0, 1.0]);
        assert_eq!(l.column(1, 0), vec![1.0, 0.0]);
    }

    #[test]
    fn pr0_tensor_slices_sum_to_one() {
        let pr0 = DMatrix::from_fn(5, 4, |i, j| ((i * 4 + j) as f64 * 0.37).fract());
        let l = pr0_to_likelihood_tensor(&pr0).unwrap();
        for j in 0..5 {
            for k in 0..4 {
                assert_eq!(l.get(0, j, k) + l.get(1, j, k), 1.0);
            }
        }
    }

    #[test]
    fn pr0_out_of_range_is_domain_error() {
        let r = pr0_to_likelihood_tensor(&DMatrix::from_element(1, 1, 1.5));
        assert!(matches!(r, Err(Error::NumericDomain(_))));
    }

    #[test]
    fn experiment_flat_round_trip_and_json_order() {
        let specs = vec![FieldSpec::new("ts", FieldKind::Vector(2)), FieldSpec::new("n_meas", FieldKind::Int)];
        let e = Experiment::from_flat(&specs, &[0.5, 1.5, 25.0]).unwrap();
        assert_eq!(e.vector("ts", 2).unwrap(), &[0.5, 1.5]);
        assert_eq!(e.int("n_meas").unwrap(), 25);
        assert_eq!(e.to_flat(&specs).unwrap(), vec![0.5, 1.5, 25.0]);
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, r#"{"ts":[0.5,1.5],"n_meas":25}"#);
        let back: Experiment = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn clamp_keeps_in_range() {
        let mut v = vec![-1e-12, 0.5, 1.0 + 1e-12];
        clamp_probabilities(&mut v, "test");
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
    }
}
