//! Concrete likelihood models: Ramsey/Rabi precession, the two-frequency
//! multi-cos model, randomized benchmarking and rebit tomography.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{
    clamp_probabilities, pr0_to_likelihoods, Experiment, FieldKind, FieldSpec, Likelihoods, Model, Outcome,
};

/// `Pr(0 | ω; t) = cos²(ωt/2)`.
pub fn precession_likelihood(omega: f64, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::config(format!("evolution time must be non-negative, got {t}")));
    }
    Ok((omega * t / 2.0).cos().powi(2))
}

/// `Pr(0 | ω₁, ω₂; t₁, t₂) = cos²(ω₁t₁/2)·cos²(ω₂t₂/2)`.
pub fn multicos_likelihood(omega: [f64; 2], ts: [f64; 2]) -> f64 {
    ((omega[0] * ts[0] / 2.0).cos() * (omega[1] * ts[1] / 2.0).cos()).powi(2)
}

/// Survival probability `A·pᵐ + B`, clamped to `[0, 1]`.
pub fn rb_likelihood(p: f64, a: f64, b: f64, m: i64) -> Result<f64> {
    if !rb_params_valid(p, a, b) {
        return Err(Error::Validity { row: 0, detail: format!("(p, A, B) = ({p}, {a}, {b}) violates 0≤p≤1, A,B≥0, A+B≤1") });
    }
    if m < 1 {
        return Err(Error::config(format!("sequence length must be at least 1, got {m}")));
    }
    let mut v = [a * pow_int(p, m) + b];
    clamp_probabilities(&mut v, "randomized benchmarking survival");
    Ok(v[0])
}

/// Average gate fidelity from the depolarizing parameter: `F = (p(d−1)+1)/d`.
pub fn rb_fidelity(p: f64, d: u32) -> Result<f64> {
    if d < 2 {
        return Err(Error::config(format!("system dimension must be at least 2, got {d}")));
    }
    let d = f64::from(d);
    Ok((p * (d - 1.0) + 1.0) / d)
}

/// Born-rule probability of the `+` outcome for a rebit at Bloch-disk point
/// `(x, z)` measured along the unit axis `axis = (a_x, a_z)`.
pub fn rebit_likelihood(x: f64, z: f64, axis: [f64; 2]) -> Result<f64> {
    if !(x * x + z * z <= 1.0) {
        return Err(Error::Validity { row: 0, detail: format!("Bloch vector ({x}, {z}) lies outside the unit disk") });
    }
    check_axis(&axis)?;
    Ok((1.0 + x * axis[0] + z * axis[1]) / 2.0)
}

fn rb_params_valid(p: f64, a: f64, b: f64) -> bool {
    (0.0..=1.0).contains(&p) && a >= 0.0 && b >= 0.0 && a + b <= 1.0
}

fn check_axis(axis: &[f64]) -> Result<()> {
    let norm = axis[0].hypot(axis[1]);
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("measurement axis must be unit-norm, has norm {norm}")));
    }
    Ok(())
}

fn pow_int(base: f64, m: i64) -> f64 {
    match i32::try_from(m) {
        Ok(k) => base.powi(k),
        Err(_) => base.powf(m as f64),
    }
}

/// Builds the `[particle × experiment]` outcome-0 matrix from a per-entry rule.
fn pr0_matrix(
    params: &DMatrix<f64>,
    experiments: &[Experiment],
    mut rule: impl FnMut(&[f64], usize) -> f64,
    prepared: impl Fn(&Experiment) -> Result<()>,
) -> Result<DMatrix<f64>> {
    for e in experiments {
        prepared(e)?;
    }
    let mut row = vec![0.0; params.ncols()];
    let mut pr0 = DMatrix::zeros(params.nrows(), experiments.len());
    for j in 0..params.nrows() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = params[(j, c)];
        }
        for k in 0..experiments.len() {
            pr0[(j, k)] = rule(&row, k);
        }
    }
    Ok(pr0)
}

/// Single-frequency precession model: one parameter ω, experiment field `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecessionModel {
    omega_bounds: [f64; 2],
}

impl Default for PrecessionModel {
    fn default() -> Self {
        PrecessionModel { omega_bounds: [0.0, 1.0] }
    }
}

impl PrecessionModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Precession model whose valid frequencies are `[lo, hi]`.
    pub fn with_bounds(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config(format!("invalid frequency bounds [{lo}, {hi}]")));
        }
        Ok(PrecessionModel { omega_bounds: [lo, hi] })
    }

    pub fn bounds(&self) -> [f64; 2] {
        self.omega_bounds
    }
}

impl Model for PrecessionModel {
    fn name(&self) -> String {
        "precession".into()
    }

    fn n_modelparams(&self) -> usize {
        1
    }

    fn modelparam_names(&self) -> Vec<String> {
        vec!["omega".into()]
    }

    fn expparams_fields(&self) -> Vec<FieldSpec> {
        vec![FieldSpec::new("t", FieldKind::Real)]
    }

    fn n_outcomes(&self, _e: &Experiment) -> Result<usize> {
        Ok(2)
    }

    fn is_valid(&self, x: &[f64]) -> bool {
        x[0] >= self.omega_bounds[0] && x[0] <= self.omega_bounds[1]
    }

    fn clip_to_valid(&self, x: &mut [f64]) {
        x[0] = x[0].clamp(self.omega_bounds[0], self.omega_bounds[1]);
    }

    fn likelihood_unchecked(
        &self,
        outcomes: &[Outcome],
        params: &DMatrix<f64>,
        experiments: &[Experiment],
    ) -> Result<Likelihoods> {
        let ts = experiments.iter().map(|e| e.real("t")).collect::<Result<Vec<_>>>()?;
        let pr0 = pr0_matrix(
            params,
            experiments,
            |x, k| (x[0] * ts[k] / 2.0).cos().powi(2),
            |e| precession_likelihood(0.0, e.real("t")?).map(drop),
        )?;
        pr0_to_likelihoods(outcomes, &pr0)
    }
}

/// Two-frequency model with experiment field `ts = (t₁, t₂)`; valid when
/// `0 < ωᵢ ≤ 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MultiCosModel;

impl Model for MultiCosModel {
    fn name(&self) -> String {
        "multicos".into()
    }

    fn n_modelparams(&self) -> usize {
        2
    }

    fn modelparam_names(&self) -> Vec<String> {
        vec!["omega_1".into(), "omega_2".into()]
    }

    fn expparams_fields(&self) -> Vec<FieldSpec> {
        vec![FieldSpec::new("ts", FieldKind::Vector(2))]
    }

    fn n_outcomes(&self, _e: &Experiment) -> Result<usize> {
        Ok(2)
    }

    fn is_valid(&self, x: &[f64]) -> bool {
        x.iter().all(|w| *w > 0.0 && *w <= 1.0)
    }

    fn clip_to_valid(&self, x: &mut [f64]) {
        for w in x.iter_mut() {
            *w = w.clamp(f64::MIN_POSITIVE, 1.0);
        }
    }

    fn likelihood_unchecked(
        &self,
        outcomes: &[Outcome],
        params: &DMatrix<f64>,
        experiments: &[Experiment],
    ) -> Result<Likelihoods> {
        let ts = experiments
            .iter()
            .map(|e| e.vector("ts", 2).map(|v| [v[0], v[1]]))
            .collect::<Result<Vec<_>>>()?;
        let pr0 = pr0_matrix(params, experiments, |x, k| multicos_likelihood([x[0], x[1]], ts[k]), |_| Ok(()))?;
        pr0_to_likelihoods(outcomes, &pr0)
    }
}

/// Randomized benchmarking decay `A·pᵐ + B` over parameters `(p, A, B)`,
/// experiment field `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomizedBenchmarkingModel {
    dim: u32,
}

impl Default for RandomizedBenchmarkingModel {
    fn default() -> Self {
        RandomizedBenchmarkingModel { dim: 2 }
    }
}

impl RandomizedBenchmarkingModel {
    pub fn new(dim: u32) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config(format!("system dimension must be at least 2, got {dim}")));
        }
        Ok(RandomizedBenchmarkingModel { dim })
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    /// Average gate fidelity implied by a decay parameter.
    pub fn fidelity(&self, p: f64) -> f64 {
        rb_fidelity(p, self.dim).expect("dimension validated at construction")
    }
}

impl Model for RandomizedBenchmarkingModel {
    fn name(&self) -> String {
        "rb".into()
    }

    fn n_modelparams(&self) -> usize {
        3
    }

    fn modelparam_names(&self) -> Vec<String> {
        vec!["p".into(), "A".into(), "B".into()]
    }

    fn expparams_fields(&self) -> Vec<FieldSpec> {
        vec![FieldSpec::new("m", FieldKind::Int)]
    }

    fn n_outcomes(&self, _e: &Experiment) -> Result<usize> {
        Ok(2)
    }

    fn is_valid(&self, x: &[f64]) -> bool {
        rb_params_valid(x[0], x[1], x[2])
    }

    fn clip_to_valid(&self, x: &mut [f64]) {
        x[0] = x[0].clamp(0.0, 1.0);
        x[1] = x[1].max(0.0);
        x[2] = x[2].max(0.0);
        let excess = x[1] + x[2] - 1.0;
        if excess > 0.0 {
            // project onto A + B = 1, then back into the quadrant
            x[1] -= excess / 2.0;
            x[2] -= excess / 2.0;
            if x[1] < 0.0 {
                x[1] = 0.0;
                x[2] = 1.0;
            } else if x[2] < 0.0 {
                x[2] = 0.0;
                x[1] = 1.0;
            }
        }
    }

    fn likelihood_unchecked(
        &self,
        outcomes: &[Outcome],
        params: &DMatrix<f64>,
        experiments: &[Experiment],
    ) -> Result<Likelihoods> {
        let ms = experiments.iter().map(|e| e.int("m")).collect::<Result<Vec<_>>>()?;
        if let Some(m) = ms.iter().find(|m| **m < 1) {
            return Err(Error::config(format!("sequence length must be at least 1, got {m}")));
        }
        let mut pr0 = pr0_matrix(params, experiments, |x, k| x[1] * pow_int(x[0], ms[k]) + x[2], |_| Ok(()))?;
        clamp_probabilities(pr0.as_mut_slice(), "randomized benchmarking survival");
        pr0_to_likelihoods(outcomes, &pr0)
    }
}

/// Rebit tomography: Bloch-disk coordinates `(x, z)`, experiment field
/// `axis`, a unit vector in the x–z plane. Outcome 0 is `+` along the axis.
#[derive(Clone, Debug, PartialEq)]
pub struct RebitModel;

impl Model for RebitModel {
    fn name(&self) -> String {
        "rebit".into()
    }

    fn n_modelparams(&self) -> usize {
        2
    }

    fn modelparam_names(&self) -> Vec<String> {
        vec!["x".into(), "z".into()]
    }

    fn expparams_fields(&self) -> Vec<FieldSpec> {
        vec![FieldSpec::new("axis", FieldKind::Vector(2))]
    }

    fn n_outcomes(&self, _e: &Experiment) -> Result<usize> {
        Ok(2)
    }

    fn is_valid(&self, x: &[f64]) -> bool {
        x[0] * x[0] + x[1] * x[1] <= 1.0
    }

    fn clip_to_valid(&self, x: &mut [f64]) {
        let r = x[0].hypot(x[1]);
        if r > 1.0 {
            x[0] /= r;
            x[1] /= r;
            while x[0] * x[0] + x[1] * x[1] > 1.0 {
                x[0] *= 1.0 - f64::EPSILON;
                x[1] *= 1.0 - f64::EPSILON;
            }
        }
    }

    fn likelihood_unchecked(
        &self,
        outcomes: &[Outcome],
        params: &DMatrix<f64>,
        experiments: &[Experiment],
    ) -> Result<Likelihoods> {
        let axes = experiments
            .iter()
            .map(|e| e.vector("axis", 2).map(|v| [v[0], v[1]]))
            .collect::<Result<Vec<_>>>()?;
        let mut pr0 = pr0_matrix(
            params,
            experiments,
            |x, k| (1.0 + x[0] * axes[k][0] + x[1] * axes[k][1]) / 2.0,
            |e| check_axis(e.vector("axis", 2)?),
        )?;
        clamp_probabilities(pr0.as_mut_slice(), "rebit Born rule");
        pr0_to_likelihoods(outcomes, &pr0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn single(model: &dyn Model, outcome: usize, x: &[f64], e: Experiment) -> f64 {
        let params = DMatrix::from_row_slice(1, x.len(), x);
        model.likelihood(&[outcome], &params, &[e]).unwrap().get(0, 0, 0)
    }

    #[test]
    fn precession_spot_values() {
        assert_eq!(precession_likelihood(0.5, 0.0).unwrap(), 1.0);
        assert!(precession_likelihood(1.0, PI).unwrap() < 1e-30);
        assert!((precession_likelihood(0.5, PI).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(precession_likelihood(0.5, -1.0), Err(Error::Config(_))));

        let m = PrecessionModel::new();
        assert_eq!(single(&m, 0, &[0.5], Experiment::new().with_real("t", 0.0)), 1.0);
        assert!(single(&m, 0, &[1.0], Experiment::new().with_real("t", PI)) < 1e-30);
    }

    #[test]
    fn precession_outcome_one_is_complement() {
        let m = PrecessionModel::new();
        for i in 0..20 {
            let omega = (i as f64 * 0.618).fract();
            let t = i as f64 * 1.37;
            let expect = 1.0 - (omega * t / 2.0).cos().powi(2);
            let got = single(&m, 1, &[omega], Experiment::new().with_real("t", t));
            assert!((got - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn multicos_spot_values() {
        assert_eq!(multicos_likelihood([0.3, 0.7], [0.0, 0.0]), 1.0);
        assert!(multicos_likelihood([1.0, 0.4], [PI, 2.0]) < 1e-30);
        assert!((multicos_likelihood([0.5, 0.5], [PI, PI]) - 0.25).abs() < 1e-15);
        let m = MultiCosModel;
        assert_eq!(m.are_models_valid(&DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 0.5])), vec![true, false]);
    }

    #[test]
    fn rb_spot_values() {
        assert!((rb_likelihood(0.95, 0.5, 0.5, 2).unwrap() - 0.95125).abs() < 1e-15);
        assert!((rb_likelihood(0.95, 0.5, 0.5, 2000).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(rb_likelihood(1.0, 0.3, 0.4, 17).unwrap(), 0.3 + 0.4);
        assert!(matches!(rb_likelihood(0.9, 0.7, 0.7, 1), Err(Error::Validity { .. })));
    }

    #[test]
    fn rb_fidelity_spot_values() {
        assert_eq!(rb_fidelity(1.0, 2).unwrap(), 1.0);
        assert_eq!(rb_fidelity(0.0, 2).unwrap(), 0.5);
        assert!((rb_fidelity(0.95, 2).unwrap() - 0.975).abs() < 1e-15);
        assert!(matches!(rb_fidelity(0.9, 1), Err(Error::Config(_))));
    }

    #[test]
    fn rebit_spot_values() {
        assert_eq!(rebit_likelihood(0.0, 0.0, [0.6, 0.8]).unwrap(), 0.5);
        assert_eq!(rebit_likelihood(0.0, 1.0, [0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(rebit_likelihood(1.0, 0.0, [0.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(rebit_likelihood(1.0, 0.7, [0.0, 1.0]), Err(Error::Validity { .. })));
        let m = RebitModel;
        let bad = DMatrix::from_row_slice(1, 2, &[1.2, 0.0]);
        assert_eq!(m.are_models_valid(&bad), vec![false]);
    }

    #[test]
    fn likelihood_rejects_invalid_rows_by_index() {
        let m = PrecessionModel::new();
        let params = DMatrix::from_column_slice(3, 1, &[0.2, 0.4, 1.5]);
        let err = m.likelihood(&[0], &params, &[Experiment::new().with_real("t", 1.0)]).unwrap_err();
        assert!(matches!(err, Error::Validity { row: 2, .. }));
    }

    #[test]
    fn rb_clip_lands_in_region() {
        let m = RandomizedBenchmarkingModel::default();
        for x in [[1.2, 0.8, 0.6], [0.5, -0.1, 1.3], [-0.1, 1.4, -0.2], [0.9, 0.6, 0.6]] {
            let mut v = x;
            m.clip_to_valid(&mut v);
            assert!(m.is_valid(&v), "{x:?} -> {v:?}");
        }
    }
}
