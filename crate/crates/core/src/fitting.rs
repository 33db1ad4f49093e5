//! Simultaneous least-squares fit of the rate model to calibration traces
//! recorded at several laser intensities.
//!
//! The rates `γ, S0, S1, D0, D1` and the efficiency `η` are shared by every
//! dataset; each dataset has its own excitation rate and, optionally, a
//! constant background. Positive parameters are fitted in log space.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photophysics::{FluorescenceTrace, RateModel};

pub const DEFAULT_MAX_ITERATIONS: usize = 500;
pub const DEFAULT_TOLERANCE: f64 = 1e-10;
/// Relative step used for the forward-difference Jacobian.
pub const JACOBIAN_STEP: f64 = 1e-6;

const SHARED_NAMES: [&str; 6] = ["gamma", "s0", "s1", "d0", "d1", "eta"];

/// Calibration traces recorded at one laser intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub label: String,
    /// Laser intensity in multiples of the saturation intensity. Used to
    /// order datasets and seed the excitation guess.
    pub intensity: f64,
    pub ms0: FluorescenceTrace,
    pub ms1: FluorescenceTrace,
    /// Measurements averaged into each trace.
    pub n_averages: f64,
}

/// An independently measured lifetime with its standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifetimeConstraint {
    pub value_ns: f64,
    pub sigma_ns: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    /// `1/(γ + S0)`.
    pub t0: LifetimeConstraint,
    /// `1/(γ + S1)`.
    pub t1: LifetimeConstraint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `σ = √counts / N`, floored at one count.
    #[default]
    Poisson,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    /// Penalty residuals scaled by the lifetime uncertainties.
    #[default]
    Soft,
    /// `S0` and `S1` are eliminated through the measured lifetimes.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProblem {
    pub datasets: Vec<Dataset>,
    pub constraints: Constraints,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub constraint_mode: ConstraintMode,
    /// Fit a constant background per dataset.
    #[serde(default)]
    pub background: bool,
}

impl FitProblem {
    pub fn new(datasets: Vec<Dataset>, constraints: Constraints) -> Self {
        Self {
            datasets,
            constraints,
            weighting: Weighting::Poisson,
            constraint_mode: ConstraintMode::Soft,
            background: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .datasets
            .first()
            .ok_or_else(|| Error::InvalidInput("fit needs at least one dataset".into()))?;
        for d in &self.datasets {
            d.ms0.validate()?;
            d.ms1.validate()?;
            if d.ms0.is_empty() || d.ms0.len() != d.ms1.len() {
                return Err(Error::InvalidInput(format!(
                    "dataset {}: traces must be non-empty and of equal length",
                    d.label
                )));
            }
            if d.ms0.dt != first.ms0.dt || d.ms1.dt != first.ms0.dt {
                return Err(Error::InvalidInput(format!(
                    "dataset {}: all traces must share one bin width",
                    d.label
                )));
            }
            if !(d.intensity > 0.0) || !d.intensity.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "dataset {}: intensity must be positive",
                    d.label
                )));
            }
            if !(d.n_averages >= 1.0) || !d.n_averages.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "dataset {}: need at least one average",
                    d.label
                )));
            }
        }
        for (name, c) in [("t0", self.constraints.t0), ("t1", self.constraints.t1)] {
            if !(c.value_ns > 0.0) || !(c.sigma_ns > 0.0) || !c.value_ns.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "constraint {name} needs positive value and uncertainty"
                )));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.datasets[0].ms0.dt
    }

    /// Number of residuals: two traces per dataset plus two lifetime terms.
    pub fn residual_count(&self) -> usize {
        2 * self.datasets.iter().map(|d| d.ms0.len()).sum::<usize>() + 2
    }

    /// Standard deviation of every data bin, in residual order.
    pub fn sigmas(&self) -> Vec<f64> {
        self.datasets
            .iter()
            .flat_map(|d| {
                let n = d.n_averages;
                d.ms0.bins.iter().chain(&d.ms1.bins).map(move |&m| match self.weighting {
                    Weighting::Poisson => (m * n).max(1.0).sqrt() / n,
                    Weighting::Uniform => 1.0,
                })
            })
            .collect()
    }

    /// Copy restricted to the datasets at the given indices.
    pub fn subset(&self, indices: &[usize]) -> FitProblem {
        FitProblem {
            datasets: indices.iter().map(|&i| self.datasets[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Point in parameter space. Rates in MHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParameters {
    pub radiative: f64,
    pub shelving0: f64,
    pub shelving1: f64,
    pub deshelving0: f64,
    pub deshelving1: f64,
    pub efficiency: f64,
    /// One excitation rate per dataset.
    pub excitation: Vec<f64>,
    /// One background (photons per bin per measurement) per dataset; empty
    /// when backgrounds are not fitted.
    #[serde(default)]
    pub background: Vec<f64>,
}

impl FitParameters {
    /// Shared rates with each dataset's excitation rate taken from `rates`.
    pub fn from_model(model: &RateModel, excitation: Vec<f64>) -> Self {
        Self {
            radiative: model.radiative,
            shelving0: model.shelving0,
            shelving1: model.shelving1,
            deshelving0: model.deshelving0,
            deshelving1: model.deshelving1,
            efficiency: model.efficiency,
            excitation,
            background: Vec::new(),
        }
    }

    /// Rate model of dataset `k`.
    pub fn model(&self, k: usize) -> RateModel {
        RateModel {
            excitation: self.excitation[k],
            radiative: self.radiative,
            shelving0: self.shelving0,
            shelving1: self.shelving1,
            deshelving0: self.deshelving0,
            deshelving1: self.deshelving1,
            efficiency: self.efficiency,
        }
    }

    fn shared(&self) -> [f64; 6] {
        [
            self.radiative,
            self.shelving0,
            self.shelving1,
            self.deshelving0,
            self.deshelving1,
            self.efficiency,
        ]
    }

    pub fn lifetime_ms0_ns(&self) -> f64 {
        1000.0 / (self.radiative + self.shelving0)
    }

    pub fn lifetime_ms1_ns(&self) -> f64 {
        1000.0 / (self.radiative + self.shelving1)
    }

    pub fn singlet_lifetime_ns(&self) -> f64 {
        1000.0 / (self.deshelving0 + self.deshelving1)
    }

    fn check(&self, n_sets: usize, background: bool) -> Result<()> {
        if self.excitation.len() != n_sets {
            return Err(Error::InvalidParameter(format!(
                "expected {n_sets} excitation rates, got {}",
                self.excitation.len()
            )));
        }
        let expect_bg = if background { n_sets } else { 0 };
        if self.background.len() != expect_bg {
            return Err(Error::InvalidParameter(format!(
                "expected {expect_bg} backgrounds, got {}",
                self.background.len()
            )));
        }
        for (name, v) in SHARED_NAMES.iter().zip(self.shared()) {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParameter(format!("{name} = {v} is out of bounds")));
            }
        }
        if self.radiative == 0.0 || self.efficiency > 1.0 {
            return Err(Error::InvalidParameter(format!(
                "gamma = {}, eta = {} out of bounds",
                self.radiative, self.efficiency
            )));
        }
        if let Some(r) = self.excitation.iter().find(|r| !r.is_finite() || **r <= 0.0) {
            return Err(Error::InvalidParameter(format!("excitation {r} out of bounds")));
        }
        if let Some(b) = self.background.iter().find(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter(format!("background {b} out of bounds")));
        }
        Ok(())
    }
}

/// Noise-free model traces for every dataset.
pub fn model_traces(
    problem: &FitProblem,
    params: &FitParameters,
) -> Result<Vec<(FluorescenceTrace, FluorescenceTrace)>> {
    params.check(problem.datasets.len(), problem.background)?;
    let dt = problem.dt();
    problem
        .datasets
        .par_iter()
        .enumerate()
        .map(|(k, d)| {
            let (mut ms0, mut ms1) = params
                .model(k)
                .calibration_traces(d.ms0.len(), dt)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            if let Some(&bg) = params.background.get(k) {
                ms0.bins.iter_mut().chain(ms1.bins.iter_mut()).for_each(|m| *m += bg);
            }
            Ok((ms0, ms1))
        })
        .collect()
}

/// Weighted residuals `(data - model)/σ` for every bin, then the two
/// lifetime penalties `(1/(γ+S) - t)/σ_t`.
pub fn residuals(problem: &FitProblem, params: &FitParameters) -> Result<Vec<f64>> {
    residuals_with(problem, params, &problem.sigmas())
}

fn residuals_with(problem: &FitProblem, params: &FitParameters, sigmas: &[f64]) -> Result<Vec<f64>> {
    let models = model_traces(problem, params)?;
    let mut out = Vec::with_capacity(problem.residual_count());
    for (d, (m0, m1)) in problem.datasets.iter().zip(&models) {
        let data = d.ms0.bins.iter().chain(&d.ms1.bins);
        let model = m0.bins.iter().chain(&m1.bins);
        out.extend(data.zip(model).map(|(x, m)| x - m));
    }
    for (r, s) in out.iter_mut().zip(sigmas) {
        *r /= s;
    }
    let c = &problem.constraints;
    out.push((params.lifetime_ms0_ns() - c.t0.value_ns) / c.t0.sigma_ns);
    out.push((params.lifetime_ms1_ns() - c.t1.value_ns) / c.t1.sigma_ns);
    Ok(out)
}

/// Maps the free-parameter vector to and from [`FitParameters`].
#[derive(Debug, Clone)]
struct Layout {
    n_sets: usize,
    hard: bool,
    background: bool,
    t0: f64,
    t1: f64,
}

impl Layout {
    fn new(problem: &FitProblem) -> Self {
        Self {
            n_sets: problem.datasets.len(),
            hard: problem.constraint_mode == ConstraintMode::Hard,
            background: problem.background,
            t0: problem.constraints.t0.value_ns,
            t1: problem.constraints.t1.value_ns,
        }
    }

    fn n_shared(&self) -> usize {
        if self.hard {
            4
        } else {
            6
        }
    }

    fn len(&self) -> usize {
        self.n_shared() + self.n_sets * if self.background { 2 } else { 1 }
    }

    fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = SHARED_NAMES
            .iter()
            .filter(|n| !(self.hard && (**n == "s0" || **n == "s1")))
            .map(|n| n.to_string())
            .collect();
        names.extend((0..self.n_sets).map(|k| format!("r{k}")));
        if self.background {
            names.extend((0..self.n_sets).map(|k| format!("bg{k}")));
        }
        names
    }

    fn encode(&self, p: &FitParameters) -> Vec<f64> {
        let mut theta = vec![p.radiative.ln()];
        if !self.hard {
            theta.extend([p.shelving0.ln(), p.shelving1.ln()]);
        }
        theta.extend([p.deshelving0.ln(), p.deshelving1.ln(), p.efficiency.ln()]);
        theta.extend(p.excitation.iter().map(|r| r.ln()));
        theta.extend(&p.background);
        theta
    }

    fn decode(&self, theta: &[f64]) -> Result<FitParameters> {
        let mut it = theta.iter().copied();
        let mut next_exp = || it.next().map(f64::exp).unwrap_or(f64::NAN);
        let radiative = next_exp();
        let (shelving0, shelving1) = if self.hard {
            (1000.0 / self.t0 - radiative, 1000.0 / self.t1 - radiative)
        } else {
            (next_exp(), next_exp())
        };
        if !(shelving0 > 0.0 && shelving1 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma = {radiative} leaves no room for shelving under the lifetime constraints"
            )));
        }
        let deshelving0 = next_exp();
        let deshelving1 = next_exp();
        let efficiency = next_exp();
        let excitation = (0..self.n_sets).map(|_| next_exp()).collect();
        let start = self.n_shared() + self.n_sets;
        let background = if self.background {
            theta[start..start + self.n_sets].to_vec()
        } else {
            Vec::new()
        };
        Ok(FitParameters {
            radiative,
            shelving0,
            shelving1,
            deshelving0,
            deshelving1,
            efficiency,
            excitation,
            background,
        })
    }

    /// Jacobian of the full parameter list (shared six, excitations,
    /// backgrounds) with respect to the free vector.
    fn transform(&self, p: &FitParameters) -> DMatrix<f64> {
        let n_full = 6 + self.n_sets * if self.background { 2 } else { 1 };
        let mut t = DMatrix::zeros(n_full, self.len());
        t[(0, 0)] = p.radiative;
        if self.hard {
            t[(1, 0)] = -p.radiative;
            t[(2, 0)] = -p.radiative;
            t[(3, 1)] = p.deshelving0;
            t[(4, 2)] = p.deshelving1;
            t[(5, 3)] = p.efficiency;
        } else {
            for (i, v) in p.shared().iter().enumerate().skip(1) {
                t[(i, i)] = *v;
            }
        }
        let off = self.n_shared();
        for k in 0..self.n_sets {
            t[(6 + k, off + k)] = p.excitation[k];
            if self.background {
                t[(6 + self.n_sets + k, off + self.n_sets + k)] = 1.0;
            }
        }
        t
    }
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CostChange,
    StepSize,
    /// Damping grew without finding a lower cost.
    Stalled,
    MaxIterations,
}

impl Termination {
    pub fn converged(&self) -> bool {
        matches!(self, Termination::CostChange | Termination::StepSize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub initial_damping: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FitParameters,
    /// Standard errors, same layout as `params`. Zero for parameters fixed
    /// by hard constraints only through their dependence on `γ`.
    pub std_errors: FitParameters,
    pub reduced_chi_square: f64,
    /// Sum of squared residuals.
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub weighting: Weighting,
    pub constraint_mode: ConstraintMode,
    /// Derived lifetimes `(value, std error)` in ns.
    pub t0_ns: (f64, f64),
    pub t1_ns: (f64, f64),
    pub ts_ns: (f64, f64),
    /// Covariance of the full parameter list (shared six, excitations,
    /// backgrounds).
    pub covariance: Vec<Vec<f64>>,
}

/// Default starting point: `γ = 66, S0 = 10, S1 = 90, D0 = 5, D1 = 2` MHz,
/// excitation from each dataset's intensity and the guess's saturation
/// rate, and `η` matched to the total recorded signal.
pub fn default_guess(problem: &FitProblem) -> Result<FitParameters> {
    let base = RateModel {
        excitation: 1.0,
        radiative: 66.0,
        shelving0: 10.0,
        shelving1: 90.0,
        deshelving0: 5.0,
        deshelving1: 2.0,
        efficiency: 1.0,
    };
    guess_from_model(problem, &base)
}

/// Starting point from a rate model: excitations scale with intensity and
/// `η` is set so the model reproduces the total recorded signal.
pub fn guess_from_model(problem: &FitProblem, model: &RateModel) -> Result<FitParameters> {
    problem.validate()?;
    let rsat = model.with_efficiency(1.0).saturation_rate()?;
    let excitation = problem.datasets.iter().map(|d| d.intensity * rsat).collect();
    let mut params = FitParameters::from_model(&model.with_efficiency(1.0), excitation);
    if problem.background {
        params.background = vec![0.0; problem.datasets.len()];
    }
    params.efficiency = matched_efficiency(problem, &params)?;
    Ok(params)
}

fn matched_efficiency(problem: &FitProblem, params: &FitParameters) -> Result<f64> {
    let mut unit = params.clone();
    unit.efficiency = 1.0;
    unit.background.iter_mut().for_each(|b| *b = 0.0);
    let model: f64 = model_traces(problem, &unit)?
        .iter()
        .map(|(a, b)| a.bins.iter().chain(&b.bins).sum::<f64>())
        .sum();
    let data: f64 = problem
        .datasets
        .iter()
        .map(|d| d.ms0.bins.iter().chain(&d.ms1.bins).sum::<f64>())
        .sum();
    if !(model > 0.0) || !(data > 0.0) {
        return Err(Error::InvalidInput("no signal to match the efficiency against".into()));
    }
    Ok((data / model).min(1.0))
}

pub fn fit(problem: &FitProblem, guess: &FitParameters) -> Result<FitResult> {
    fit_with(problem, guess, &FitOptions::default())
}

/// Levenberg–Marquardt with Marquardt diagonal scaling and a
/// forward-difference Jacobian.
pub fn fit_with(problem: &FitProblem, guess: &FitParameters, options: &FitOptions) -> Result<FitResult> {
    problem.validate()?;
    let layout = Layout::new(problem);
    guess.check(layout.n_sets, layout.background)?;
    let sigmas = problem.sigmas();
    let eval = |theta: &[f64]| -> Result<DVector<f64>> {
        let p = layout.decode(theta)?;
        Ok(DVector::from_vec(residuals_with(problem, &p, &sigmas)?))
    };

    let mut theta = layout.encode(guess);
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidParameter("initial guess must be strictly positive".into()));
    }
    let mut r = eval(&theta)?;
    let mut cost = r.norm_squared();
    let mut lambda = options.initial_damping;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    let mut jac = jacobian(&eval, &theta, &r)?;
    check_columns(&jac, &layout)?;
    while iterations < options.max_iterations {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            let step_norm = step.norm();
            match eval(&trial) {
                Ok(r_new) if r_new.norm_squared() < cost => {
                    let new_cost = r_new.norm_squared();
                    let change = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                    theta = trial;
                    r = r_new;
                    cost = new_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if change < options.tolerance {
                        termination = Termination::CostChange;
                    } else if step_norm < options.tolerance {
                        termination = Termination::StepSize;
                    }
                    break;
                }
                _ => {
                    if step_norm < options.tolerance {
                        termination = Termination::StepSize;
                        break;
                    }
                    lambda *= 10.0;
                }
            }
        }
        if termination != Termination::MaxIterations {
            break;
        }
        if !accepted {
            termination = Termination::Stalled;
            break;
        }
        jac = jacobian(&eval, &theta, &r)?;
    }
    if cost == 0.0 {
        termination = Termination::CostChange;
    }

    let params = layout.decode(&theta)?;
    let jac = jacobian(&eval, &theta, &r)?;
    let n_data = problem.residual_count() - 2;
    let n_resid = n_data + if layout.hard { 0 } else { 2 };
    let dof = n_resid.saturating_sub(layout.len()).max(1);
    let reduced = cost / dof as f64;

    let jtj = jac.transpose() * &jac;
    let svd = jtj.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    let inv = svd
        .pseudo_inverse(eps)
        .map_err(|e| Error::SingularJacobian(e.to_string()))?;
    let cov_theta = inv * reduced;
    let t = layout.transform(&params);
    let cov = &t * cov_theta * t.transpose();
    let se = |i: usize| cov[(i, i)].max(0.0).sqrt();
    let n = layout.n_sets;
    let std_errors = FitParameters {
        radiative: se(0),
        shelving0: se(1),
        shelving1: se(2),
        deshelving0: se(3),
        deshelving1: se(4),
        efficiency: se(5),
        excitation: (0..n).map(|k| se(6 + k)).collect(),
        background: if layout.background { (0..n).map(|k| se(6 + n + k)).collect() } else { Vec::new() },
    };
    let lifetime_error = |t: f64, i: usize, j: usize| {
        let g = -t * t / 1000.0;
        (g * g * (cov[(i, i)] + cov[(j, j)] + 2.0 * cov[(i, j)])).max(0.0).sqrt()
    };
    let t0 = params.lifetime_ms0_ns();
    let t1 = params.lifetime_ms1_ns();
    let ts = params.singlet_lifetime_ns();

    Ok(FitResult {
        std_errors,
        reduced_chi_square: reduced,
        chi_square: cost,
        degrees_of_freedom: dof,
        converged: termination.converged(),
        termination,
        iterations,
        weighting: problem.weighting,
        constraint_mode: problem.constraint_mode,
        t0_ns: (t0, lifetime_error(t0, 0, 1)),
        t1_ns: (t1, lifetime_error(t1, 0, 2)),
        ts_ns: (ts, lifetime_error(ts, 3, 4)),
        covariance: (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect(),
        params,
    })
}

/// Forward differences with step `JACOBIAN_STEP` per coordinate. The free
/// coordinates are logarithms, so this is a relative step in the rates.
fn jacobian<F>(eval: &F, theta: &[f64], r: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    let cols: Vec<DVector<f64>> = (0..theta.len())
        .map(|j| {
            let h = JACOBIAN_STEP * theta[j].abs().max(1.0);
            let mut shifted = theta.to_vec();
            shifted[j] += h;
            let r_h = eval(&shifted)?;
            Ok((r_h - r) / h)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&cols))
}

fn check_columns(jac: &DMatrix<f64>, layout: &Layout) -> Result<()> {
    let names = layout.names();
    for (j, name) in names.iter().enumerate() {
        if jac.column(j).iter().all(|v| *v == 0.0) {
            return Err(Error::SingularJacobian(format!("residuals do not depend on {name}")));
        }
    }
    Ok(())
}

/// Reduced chi-square of one dataset: its squared residuals over its bin
/// count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetGoodness {
    pub label: String,
    pub intensity: f64,
    pub reduced_chi_square: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodnessReport {
    pub overall: f64,
    pub datasets: Vec<DatasetGoodness>,
}

pub fn goodness_report(result: &FitResult, problem: &FitProblem) -> Result<GoodnessReport> {
    let r = residuals(problem, &result.params)?;
    let mut offset = 0;
    let datasets = problem
        .datasets
        .iter()
        .map(|d| {
            let n = 2 * d.ms0.len();
            let chi2: f64 = r[offset..offset + n].iter().map(|x| x * x).sum();
            offset += n;
            DatasetGoodness {
                label: d.label.clone(),
                intensity: d.intensity,
                reduced_chi_square: chi2 / n as f64,
            }
        })
        .collect();
    Ok(GoodnessReport {
        overall: result.reduced_chi_square,
        datasets,
    })
}

/// One shared parameter fitted on the low-intensity subset and on all data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub parameter: String,
    pub low: f64,
    pub low_error: f64,
    pub all: f64,
    pub all_error: f64,
    /// `all / low - 1`.
    pub relative_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTable {
    /// Intensities of the low subset.
    pub low_intensities: Vec<f64>,
    pub low_reduced_chi_square: f64,
    pub all_reduced_chi_square: f64,
    pub rows: Vec<DriftRow>,
}

/// Fits the `n_low` lowest-intensity datasets and then all datasets, and
/// tabulates how the shared parameters move.
pub fn drift_table(problem: &FitProblem, guess: &FitParameters, n_low: usize) -> Result<DriftTable> {
    problem.validate()?;
    if n_low == 0 || n_low > problem.datasets.len() {
        return Err(Error::InvalidInput(format!(
            "low subset size must be in 1..={}, got {n_low}",
            problem.datasets.len()
        )));
    }
    let mut order: Vec<usize> = (0..problem.datasets.len()).collect();
    order.sort_by(|a, b| problem.datasets[*a].intensity.total_cmp(&problem.datasets[*b].intensity));
    let low_idx = &order[..n_low];
    let low_problem = problem.subset(low_idx);
    let low_guess = FitParameters {
        excitation: low_idx.iter().map(|&i| guess.excitation[i]).collect(),
        background: if guess.background.is_empty() {
            Vec::new()
        } else {
            low_idx.iter().map(|&i| guess.background[i]).collect()
        },
        ..guess.clone()
    };
    let low = fit(&low_problem, &low_guess)?;
    let all = fit(problem, guess)?;
    let pairs = |p: &FitParameters, e: &FitParameters| -> Vec<(f64, f64)> {
        p.shared().into_iter().zip(e.shared()).collect()
    };
    let lo = pairs(&low.params, &low.std_errors);
    let al = pairs(&all.params, &all.std_errors);
    let rows = SHARED_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| DriftRow {
            parameter: name.to_string(),
            low: lo[i].0,
            low_error: lo[i].1,
            all: al[i].0,
            all_error: al[i].1,
            relative_change: al[i].0 / lo[i].0 - 1.0,
        })
        .collect();
    Ok(DriftTable {
        low_intensities: low_idx.iter().map(|&i| problem.datasets[i].intensity).collect(),
        low_reduced_chi_square: low.reduced_chi_square,
        all_reduced_chi_square: all.reduced_chi_square,
        rows,
    })
}

impl fmt::Display for FitResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.params;
        let e = &self.std_errors;
        writeln!(
            f,
            "{:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "gamma", "S0", "S1", "D0", "D1", "t0 (ns)", "t1 (ns)", "ts (ns)"
        )?;
        writeln!(
            f,
            "{:>9.2} {:>9.2} {:>9.2} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.1}",
            p.radiative,
            p.shelving0,
            p.shelving1,
            p.deshelving0,
            p.deshelving1,
            self.t0_ns.0,
            self.t1_ns.0,
            self.ts_ns.0
        )?;
        writeln!(
            f,
            "{:>9.2} {:>9.2} {:>9.2} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.1}",
            e.radiative,
            e.shelving0,
            e.shelving1,
            e.deshelving0,
            e.deshelving1,
            self.t0_ns.1,
            self.t1_ns.1,
            self.ts_ns.1
        )?;
        writeln!(f, "eta = {:.6e} +/- {:.2e}", p.efficiency, e.efficiency)?;
        for (k, (r, s)) in p.excitation.iter().zip(&e.excitation).enumerate() {
            writeln!(f, "R[{k}] = {r:.3} +/- {s:.3} MHz")?;
        }
        write!(
            f,
            "reduced chi-square {:.4} ({} dof), {} after {} iterations, {} weights",
            self.reduced_chi_square,
            self.degrees_of_freedom,
            if self.converged { "converged" } else { "not converged" },
            self.iterations,
            match self.weighting {
                Weighting::Poisson => "poisson",
                Weighting::Uniform => "uniform",
            }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::nv1;

    const BINS: usize = 60;

    fn constraints_for(model: &RateModel, rel_sigma: f64) -> Constraints {
        let t0 = model.lifetime_ms0_ns();
        let t1 = model.lifetime_ms1_ns();
        Constraints {
            t0: LifetimeConstraint { value_ns: t0, sigma_ns: rel_sigma * t0 },
            t1: LifetimeConstraint { value_ns: t1, sigma_ns: rel_sigma * t1 },
        }
    }

    fn noiseless_problem(model: &RateModel, intensities: &[f64]) -> (FitProblem, FitParameters) {
        let rsat = model.saturation_rate().unwrap();
        let excitation: Vec<f64> = intensities.iter().map(|i| i * rsat).collect();
        let truth = FitParameters::from_model(model, excitation.clone());
        let datasets = intensities
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let (ms0, ms1) = truth.model(k).calibration_traces(BINS, 8.33).unwrap();
                Dataset { label: format!("{i}"), intensity: i, ms0, ms1, n_averages: 3e7 }
            })
            .collect();
        (FitProblem::new(datasets, constraints_for(model, 0.01)), truth)
    }

    fn perturbed(p: &FitParameters, factors: &[f64]) -> FitParameters {
        let mut q = p.clone();
        q.radiative *= factors[0];
        q.shelving0 *= factors[1];
        q.shelving1 *= factors[2];
        q.deshelving0 *= factors[3];
        q.deshelving1 *= factors[4];
        q.efficiency *= factors[5];
        for r in &mut q.excitation {
            *r *= factors[6];
        }
        q
    }

    #[test]
    fn residuals_vanish_at_truth() {
        let (problem, truth) = noiseless_problem(&nv1(), &[0.5, 1.5]);
        let r = residuals(&problem, &truth).unwrap();
        assert_eq!(r.len(), problem.residual_count());
        assert_eq!(r.len(), 2 * 2 * BINS + 2);
        assert!(r.iter().all(|x| x.abs() < 1e-9), "{:?}", r.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn constraint_residual_definition() {
        let (mut problem, truth) = noiseless_problem(&nv1(), &[1.0]);
        problem.constraints.t0 = LifetimeConstraint { value_ns: 12.0, sigma_ns: 0.5 };
        let r = residuals(&problem, &truth).unwrap();
        let expect = (1000.0 / (truth.radiative + truth.shelving0) - 12.0) / 0.5;
        assert!((r[r.len() - 2] - expect).abs() < 1e-12);
        assert!(r[r.len() - 1].abs() < 1e-12);
    }

    #[test]
    fn residuals_reject_negative_rates() {
        let (problem, mut truth) = noiseless_problem(&nv1(), &[1.0]);
        truth.deshelving1 = -1.0;
        assert!(matches!(residuals(&problem, &truth), Err(Error::InvalidParameter(_))));
        truth.deshelving1 = 2.0;
        truth.excitation.push(3.0);
        assert!(matches!(residuals(&problem, &truth), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn forward_jacobian_matches_central() {
        let (problem, truth) = noiseless_problem(&nv1(), &[0.7]);
        let layout = Layout::new(&problem);
        let sigmas = problem.sigmas();
        let eval = |t: &[f64]| -> Result<DVector<f64>> {
            Ok(DVector::from_vec(residuals_with(&problem, &layout.decode(t)?, &sigmas)?))
        };
        let theta = layout.encode(&perturbed(&truth, &[1.1, 0.9, 1.1, 0.9, 1.1, 1.0, 1.05]));
        let r = eval(&theta).unwrap();
        let fwd = jacobian(&eval, &theta, &r).unwrap();
        for j in 0..theta.len() {
            let h = 1e-4;
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[j] += h;
            b[j] -= h;
            let central = (eval(&a).unwrap() - eval(&b).unwrap()) / (2.0 * h);
            let scale = central.amax().max(1e-6);
            let diff = (fwd.column(j) - &central).amax();
            assert!(diff / scale < 1e-3, "column {j}: {diff} vs {scale}");
        }
    }

    #[test]
    fn layout_round_trip() {
        let (mut problem, mut truth) = noiseless_problem(&nv1(), &[0.5, 1.0]);
        problem.background = true;
        truth.background = vec![1e-4, -2e-5];
        let layout = Layout::new(&problem);
        let theta = layout.encode(&truth);
        assert_eq!(theta.len(), layout.len());
        assert_eq!(layout.names().len(), layout.len());
        let back = layout.decode(&theta).unwrap();
        assert!((back.shelving1 / truth.shelving1 - 1.0).abs() < 1e-14);
        assert_eq!(back.background, truth.background);

        problem.constraint_mode = ConstraintMode::Hard;
        let layout = Layout::new(&problem);
        assert_eq!(layout.len(), 4 + 4);
        let back = layout.decode(&layout.encode(&truth)).unwrap();
        assert!((back.shelving0 / truth.shelving0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_round_trip() {
        let model = nv1();
        let (problem, truth) = noiseless_problem(&model, &[0.3, 0.8, 1.5]);
        let guess = perturbed(&truth, &[1.3, 0.7, 1.25, 0.75, 1.3, 1.2, 0.8]);
        let result = fit(&problem, &guess).unwrap();
        assert!(result.converged, "{:?}", result.termination);
        let p = &result.params;
        for (got, want) in [
            (p.radiative, truth.radiative),
            (p.shelving0, truth.shelving0),
            (p.shelving1, truth.shelving1),
            (p.deshelving0, truth.deshelving0),
            (p.deshelving1, truth.deshelving1),
        ] {
            assert!((got / want - 1.0).abs() < 0.01, "{got} vs {want}");
        }
        assert!(result.reduced_chi_square < 1e-6);
        assert!((result.ts_ns.0 - 144.0).abs() < 1.0);
        let report = goodness_report(&result, &problem).unwrap();
        assert!(report.datasets.iter().all(|d| d.reduced_chi_square < 1e-6));
    }

    #[test]
    fn hard_constraints_hold_exactly() {
        let model = nv1();
        let (mut problem, truth) = noiseless_problem(&model, &[0.5, 1.2]);
        problem.constraint_mode = ConstraintMode::Hard;
        let guess = perturbed(&truth, &[1.05, 1.0, 1.0, 0.8, 1.2, 1.1, 0.9]);
        let result = fit(&problem, &guess).unwrap();
        assert!(result.converged);
        assert!((result.t0_ns.0 - model.lifetime_ms0_ns()).abs() < 1e-9);
        assert!((result.t1_ns.0 - model.lifetime_ms1_ns()).abs() < 1e-9);
        assert!((result.params.deshelving1 / model.deshelving1 - 1.0).abs() < 0.01);
    }

    #[test]
    fn flat_parameter_is_singular() {
        let (problem, _) = noiseless_problem(&nv1(), &[1.0]);
        let layout = Layout::new(&problem);
        let mut jac = DMatrix::from_element(5, layout.len(), 1.0);
        assert!(check_columns(&jac, &layout).is_ok());
        jac.column_mut(4).fill(0.0);
        let err = check_columns(&jac, &layout).unwrap_err();
        assert!(matches!(err, Error::SingularJacobian(ref m) if m.contains("d1")), "{err}");
    }

    #[test]
    fn default_guess_matches_signal() {
        let (problem, _) = noiseless_problem(&nv1(), &[0.5, 1.0]);
        let guess = default_guess(&problem).unwrap();
        assert_eq!(guess.radiative, 66.0);
        assert_eq!(guess.shelving1, 90.0);
        let total_model: f64 = model_traces(&problem, &guess)
            .unwrap()
            .iter()
            .map(|(a, b)| a.bins.iter().chain(&b.bins).sum::<f64>())
            .sum();
        let total_data: f64 = problem
            .datasets
            .iter()
            .map(|d| d.ms0.bins.iter().chain(&d.ms1.bins).sum::<f64>())
            .sum();
        assert!((total_model / total_data - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let (mut problem, truth) = noiseless_problem(&nv1(), &[1.0]);
        problem.datasets[0].ms1.dt = 4.0;
        assert!(fit(&problem, &truth).is_err());
        let (mut problem, truth) = noiseless_problem(&nv1(), &[1.0]);
        problem.constraints.t1.sigma_ns = 0.0;
        assert!(fit(&problem, &truth).is_err());
        let empty = FitProblem { datasets: vec![], ..problem };
        assert!(empty.validate().is_err());
    }
}
