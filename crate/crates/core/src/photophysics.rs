//! Five-level rate-equation model of NV-center photophysics.
//!
//! Levels are the two ground spin sublevels (`g0`, `g1`), the matching
//! optically excited states (`e0`, `e1`) and a lumped metastable singlet
//! (`s`). Excitation and radiative decay conserve spin; spin dependence
//! enters only through intersystem crossing into the singlet (shelving) and
//! decay out of it (deshelving):
//!
//! ```text
//! dg0/dt = -R g0 + γ e0 + D0 s          de0/dt = R g0 - (γ + S0) e0
//! dg1/dt = -R g1 + γ e1 + D1 s          de1/dt = R g1 - (γ + S1) e1
//! ds/dt  = S0 e0 + S1 e1 - (D0 + D1) s
//! ```
//!
//! Rates are stored in MHz; all time arguments are nanoseconds. Integration
//! uses fixed-step classical Runge-Kutta so every output is reproducible.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix5, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default Runge-Kutta step.
pub const DEFAULT_SOLVER_STEP_NS: f64 = 0.1;

/// Default histogram bin width: one tick of a 120 MHz time tagger.
pub const DEFAULT_BIN_WIDTH_NS: f64 = 8.33;

/// Populations below this are treated as fully relaxed.
pub const RELAXATION_THRESHOLD: f64 = 1e-9;

const MHZ_TO_PER_NS: f64 = 1e-3;

/// Transition rates of the five-level model plus the detection scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    /// Optical excitation rate `R` (MHz).
    pub excitation: f64,
    /// Radiative decay rate `γ` (MHz), equal for both spin states.
    pub radiative: f64,
    /// Intersystem crossing from `e0` into the singlet (MHz).
    pub shelving0: f64,
    /// Intersystem crossing from `e1` into the singlet (MHz).
    pub shelving1: f64,
    /// Singlet decay into `g0` (MHz).
    pub deshelving0: f64,
    /// Singlet decay into `g1` (MHz).
    pub deshelving1: f64,
    /// Detected photons per emitted photon.
    pub efficiency: f64,
}

impl RateModel {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("excitation", self.excitation),
            ("radiative", self.radiative),
            ("shelving0", self.shelving0),
            ("shelving1", self.shelving1),
            ("deshelving0", self.deshelving0),
            ("deshelving1", self.deshelving1),
        ];
        for (name, value) in rates {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidModel(format!(
                    "{name} must be finite and non-negative, got {value}"
                )));
            }
        }
        if self.radiative <= 0.0 {
            return Err(Error::InvalidModel("radiative rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::InvalidModel(format!(
                "efficiency must lie in [0, 1], got {}",
                self.efficiency
            )));
        }
        Ok(())
    }

    pub fn with_excitation(mut self, excitation: f64) -> Self {
        self.excitation = excitation;
        self
    }

    pub fn with_efficiency(mut self, efficiency: f64) -> Self {
        self.efficiency = efficiency;
        self
    }

    /// `1/(γ + S0)` in ns.
    pub fn lifetime_ms0_ns(&self) -> f64 {
        1.0 / ((self.radiative + self.shelving0) * MHZ_TO_PER_NS)
    }

    /// `1/(γ + S1)` in ns.
    pub fn lifetime_ms1_ns(&self) -> f64 {
        1.0 / ((self.radiative + self.shelving1) * MHZ_TO_PER_NS)
    }

    /// `1/(D0 + D1)` in ns; infinite when the singlet never decays.
    pub fn singlet_lifetime_ns(&self) -> f64 {
        1.0 / ((self.deshelving0 + self.deshelving1) * MHZ_TO_PER_NS)
    }

    /// Largest total outflow rate of any level (MHz).
    pub fn max_rate(&self, laser_on: bool) -> f64 {
        let excitation = if laser_on { self.excitation } else { 0.0 };
        excitation
            .max(self.radiative + self.shelving0)
            .max(self.radiative + self.shelving1)
            .max(self.deshelving0 + self.deshelving1)
    }

    /// Largest solver step accepted by [`RateModel::evolve`], `1/(10 · max rate)`.
    pub fn stability_limit_ns(&self, laser_on: bool) -> f64 {
        1.0 / (10.0 * self.max_rate(laser_on) * MHZ_TO_PER_NS)
    }

    /// Generator of the linear system in 1/ns, ordered (g0, g1, e0, e1, s).
    fn generator(&self, laser_on: bool) -> [[f64; 5]; 5] {
        let r = if laser_on { self.excitation } else { 0.0 } * MHZ_TO_PER_NS;
        let gamma = self.radiative * MHZ_TO_PER_NS;
        let s0 = self.shelving0 * MHZ_TO_PER_NS;
        let s1 = self.shelving1 * MHZ_TO_PER_NS;
        let d0 = self.deshelving0 * MHZ_TO_PER_NS;
        let d1 = self.deshelving1 * MHZ_TO_PER_NS;
        [
            [-r, 0.0, gamma, 0.0, d0],
            [0.0, -r, 0.0, gamma, d1],
            [r, 0.0, -(gamma + s0), 0.0, 0.0],
            [0.0, r, 0.0, -(gamma + s1), 0.0],
            [0.0, 0.0, s0, s1, -(d0 + d1)],
        ]
    }

    /// Time derivative of the populations, in 1/ns.
    pub fn derivative(&self, pop: &Populations, laser_on: bool) -> [f64; 5] {
        let m = self.generator(laser_on);
        let p = pop.to_array();
        let mut out = [0.0; 5];
        for (row, o) in m.iter().zip(out.iter_mut()) {
            *o = row.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        }
        out
    }

    fn check_step(&self, step_ns: f64, laser_on: bool) -> Result<()> {
        if !(step_ns > 0.0) || !step_ns.is_finite() {
            return Err(Error::InvalidInput(format!(
                "solver step must be positive, got {step_ns}"
            )));
        }
        let limit_ns = self.stability_limit_ns(laser_on);
        if step_ns > limit_ns {
            return Err(Error::UnstableStep { step_ns, limit_ns });
        }
        Ok(())
    }

    /// Integrates the rate equations from `init` for `duration_ns`, recording
    /// every step. The step actually used is `duration / ceil(duration / step)`.
    pub fn evolve(
        &self,
        init: &Populations,
        duration_ns: f64,
        step_ns: f64,
        laser_on: bool,
    ) -> Result<Trajectory> {
        self.validate()?;
        if !(duration_ns > 0.0) || !duration_ns.is_finite() {
            return Err(Error::InvalidInput(format!(
                "duration must be positive, got {duration_ns}"
            )));
        }
        self.check_step(step_ns, laser_on)?;
        let n = (duration_ns / step_ns - 1e-9).ceil().max(1.0) as usize;
        let stepper = Stepper::new(self, laser_on, duration_ns / n as f64);

        let mut times_ns = Vec::with_capacity(n + 1);
        let mut states = Vec::with_capacity(n + 1);
        let mut x = stepper.state(init);
        times_ns.push(0.0);
        states.push(*init);
        for k in 1..=n {
            stepper.step(&mut x);
            times_ns.push(duration_ns * k as f64 / n as f64);
            states.push(Populations::from_slice(&x[..5]));
        }
        Ok(Trajectory { times_ns, states })
    }

    /// Fixed point of the laser-on dynamics, from a direct linear solve with
    /// one balance equation replaced by normalization.
    pub fn steady_state(&self) -> Result<Populations> {
        self.validate()?;
        if !(self.excitation > 0.0) {
            return Err(Error::InvalidModel(
                "steady state requires a positive excitation rate".into(),
            ));
        }
        if self.deshelving0 + self.deshelving1 <= 0.0
            && self.shelving0 + self.shelving1 > 0.0
        {
            return Err(Error::DegenerateModel(
                "population is trapped in the singlet (no deshelving)".into(),
            ));
        }
        let g = self.generator(true);
        let mut m = Matrix5::from_fn(|i, j| g[i][j]);
        for j in 0..5 {
            m[(4, j)] = 1.0;
        }
        let rhs = Vector5::new(0.0, 0.0, 0.0, 0.0, 1.0);
        let sol = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::DegenerateModel("steady state is not unique".into()))?;
        let mut p = [0.0; 5];
        for (dst, &v) in p.iter_mut().zip(sol.iter()) {
            if !v.is_finite() || v < -1e-12 {
                return Err(Error::DegenerateModel("steady state is not unique".into()));
            }
            *dst = v.max(0.0);
        }
        Ok(Populations::from_array(p))
    }

    /// Steady state relaxed in the dark until the excited states and singlet
    /// are empty. This is the state left by optical initialization.
    pub fn pumped_initial_condition(&self) -> Result<Populations> {
        self.pumped_initial_condition_with_step(DEFAULT_SOLVER_STEP_NS)
    }

    pub fn pumped_initial_condition_with_step(&self, step_ns: f64) -> Result<Populations> {
        let steady = self.steady_state()?;
        self.check_step(step_ns, false)?;
        let chunk_ns = 10.0
            * self
                .lifetime_ms0_ns()
                .max(self.lifetime_ms1_ns())
                .max(self.singlet_lifetime_ns());
        let n = (chunk_ns / step_ns).ceil().max(1.0) as usize;
        let stepper = Stepper::new(self, false, chunk_ns / n as f64);
        let mut x = stepper.state(&steady);
        let relaxed = |x: &[f64; 6]| x[2..5].iter().all(|&v| v.abs() < RELAXATION_THRESHOLD);
        let mut chunks = 0;
        while !relaxed(&x) {
            if chunks == 64 {
                return Err(Error::DegenerateModel("dark relaxation did not complete".into()));
            }
            for _ in 0..n {
                stepper.step(&mut x);
            }
            chunks += 1;
        }
        Ok(self.fold_residual(Populations::from_slice(&x[..5])))
    }

    /// Moves whatever remains in e0, e1 and s into the ground sublevels
    /// according to the exact dark branching ratios.
    fn fold_residual(&self, p: Populations) -> Populations {
        let gamma = self.radiative;
        let k0 = gamma + self.shelving0;
        let k1 = gamma + self.shelving1;
        let d = self.deshelving0 + self.deshelving1;
        let (f0, f1) = if d > 0.0 {
            (self.deshelving0 / d, self.deshelving1 / d)
        } else {
            (0.5, 0.5)
        };
        let to_g0 = p.e0 * (gamma + self.shelving0 * f0) / k0 + p.e1 * self.shelving1 * f0 / k1 + p.s * f0;
        let to_g1 = p.e0 * self.shelving0 * f1 / k0 + p.e1 * (gamma + self.shelving1 * f1) / k1 + p.s * f1;
        Populations {
            g0: p.g0 + to_g0,
            g1: p.g1 + to_g1,
            e0: 0.0,
            e1: 0.0,
            s: 0.0,
        }
    }

    /// Ground-manifold spin polarization left behind by optical pumping at
    /// the model's excitation rate.
    pub fn initialized_polarization(&self) -> Result<f64> {
        Ok(self.pumped_initial_condition()?.spin_polarization())
    }

    /// Continuous-wave detected photon rate `η γ (e0 + e1)` (MHz).
    pub fn steady_fluorescence(&self) -> Result<f64> {
        let p = self.steady_state()?;
        Ok(self.efficiency * self.radiative * (p.e0 + p.e1))
    }

    /// Excitation rate at which steady-state fluorescence is half its
    /// saturated value, by bisection in `ln R`.
    pub fn saturation_rate(&self) -> Result<f64> {
        self.validate()?;
        let scale = self.max_rate(false);
        let limit = self.with_excitation(1e8 * scale).steady_fluorescence()?;
        let half = 0.5 * limit;
        let f = |r: f64| self.with_excitation(r).steady_fluorescence();

        let mut lo = 1e-3 * scale;
        while f(lo)? >= half {
            lo *= 0.5;
        }
        let mut hi = scale;
        while f(hi)? < half {
            hi *= 2.0;
        }
        while hi / lo - 1.0 > 1e-8 {
            let mid = (lo * hi).sqrt();
            if f(mid)? < half {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((lo * hi).sqrt())
    }

    /// Copy of the model driven at `intensity` multiples of saturation.
    pub fn at_intensity(&self, intensity: f64) -> Result<RateModel> {
        Ok(self.with_excitation(intensity_to_rate(intensity, self)?))
    }

    /// Mean detected photons per bin for one measurement after `spin` is
    /// prepared, laser on from t = 0.
    pub fn fluorescence_trace(
        &self,
        spin: SpinPreparation,
        n_bins: usize,
        bin_width_ns: f64,
    ) -> Result<FluorescenceTrace> {
        self.fluorescence_trace_with_step(spin, n_bins, bin_width_ns, DEFAULT_SOLVER_STEP_NS)
    }

    pub fn fluorescence_trace_with_step(
        &self,
        spin: SpinPreparation,
        n_bins: usize,
        bin_width_ns: f64,
        step_ns: f64,
    ) -> Result<FluorescenceTrace> {
        let pumped = self.pumped_initial_condition_with_step(step_ns)?;
        let init = match spin {
            SpinPreparation::Ms0 | SpinPreparation::Pumped => pumped,
            SpinPreparation::Ms1 => pumped.spin_flipped(),
        };
        self.fluorescence_from(&init, n_bins, bin_width_ns, step_ns)
    }

    /// The `ms0` and `ms1` calibration traces, sharing one pumped state.
    pub fn calibration_traces(
        &self,
        n_bins: usize,
        bin_width_ns: f64,
    ) -> Result<(FluorescenceTrace, FluorescenceTrace)> {
        let pumped = self.pumped_initial_condition()?;
        let ms0 = self.fluorescence_from(&pumped, n_bins, bin_width_ns, DEFAULT_SOLVER_STEP_NS)?;
        let ms1 = self.fluorescence_from(
            &pumped.spin_flipped(),
            n_bins,
            bin_width_ns,
            DEFAULT_SOLVER_STEP_NS,
        )?;
        Ok((ms0, ms1))
    }

    /// Integrates the detected photon rate bin by bin starting from `init`.
    /// Each bin is split into equal sub-steps no longer than `step_ns` so bin
    /// edges fall exactly on solver steps.
    pub fn fluorescence_from(
        &self,
        init: &Populations,
        n_bins: usize,
        bin_width_ns: f64,
        step_ns: f64,
    ) -> Result<FluorescenceTrace> {
        self.validate()?;
        if n_bins == 0 {
            return Err(Error::InvalidInput("trace needs at least one bin".into()));
        }
        if !(bin_width_ns > 0.0) || !bin_width_ns.is_finite() {
            return Err(Error::InvalidInput(format!(
                "bin width must be positive, got {bin_width_ns}"
            )));
        }
        self.check_step(step_ns, true)?;
        let sub = (bin_width_ns / step_ns - 1e-9).ceil().max(1.0) as usize;
        let stepper = Stepper::new(self, true, bin_width_ns / sub as f64);
        let mut x = stepper.state(init);
        let scale = self.efficiency * self.radiative * MHZ_TO_PER_NS;
        let mut bins = Vec::with_capacity(n_bins);
        for _ in 0..n_bins {
            x[5] = 0.0;
            for _ in 0..sub {
                stepper.step(&mut x);
            }
            bins.push((scale * x[5]).max(0.0));
        }
        Ok(FluorescenceTrace {
            dt: bin_width_ns,
            bins,
        })
    }
}

/// Converts an intensity in units of the saturation intensity into an
/// excitation rate. The map is linear through the saturation rate.
pub fn intensity_to_rate(intensity: f64, model: &RateModel) -> Result<f64> {
    if !(intensity >= 0.0) || !intensity.is_finite() {
        return Err(Error::InvalidInput(format!(
            "intensity must be finite and non-negative, got {intensity}"
        )));
    }
    if intensity == 0.0 {
        return Ok(0.0);
    }
    Ok(intensity * model.saturation_rate()?)
}

/// RK4 on the populations augmented with the running integral of `e0 + e1`.
struct Stepper {
    generator: [[f64; 5]; 5],
    h: f64,
}

impl Stepper {
    fn new(model: &RateModel, laser_on: bool, h: f64) -> Self {
        Self {
            generator: model.generator(laser_on),
            h,
        }
    }

    fn state(&self, pop: &Populations) -> [f64; 6] {
        let p = pop.to_array();
        [p[0], p[1], p[2], p[3], p[4], 0.0]
    }

    #[inline]
    fn rhs(&self, x: &[f64; 6]) -> [f64; 6] {
        let mut d = [0.0; 6];
        for (di, row) in d.iter_mut().zip(&self.generator) {
            *di = row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + row[3] * x[3] + row[4] * x[4];
        }
        d[5] = x[2] + x[3];
        d
    }

    #[inline]
    fn step(&self, x: &mut [f64; 6]) {
        let h = self.h;
        let axpy = |x: &[f64; 6], k: &[f64; 6], a: f64| {
            let mut y = [0.0; 6];
            for i in 0..6 {
                y[i] = x[i] + a * k[i];
            }
            y
        };
        let k1 = self.rhs(x);
        let k2 = self.rhs(&axpy(x, &k1, 0.5 * h));
        let k3 = self.rhs(&axpy(x, &k2, 0.5 * h));
        let k4 = self.rhs(&axpy(x, &k3, h));
        for i in 0..6 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Level occupations, ordered (g0, g1, e0, e1, s) wherever an array is used.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Populations {
    pub g0: f64,
    pub g1: f64,
    pub e0: f64,
    pub e1: f64,
    pub s: f64,
}

impl Populations {
    pub fn ground(ms: u8) -> Self {
        match ms {
            0 => Self { g0: 1.0, ..Self::default() },
            _ => Self { g1: 1.0, ..Self::default() },
        }
    }

    pub fn from_array(p: [f64; 5]) -> Self {
        Self {
            g0: p[0],
            g1: p[1],
            e0: p[2],
            e1: p[3],
            s: p[4],
        }
    }

    fn from_slice(p: &[f64]) -> Self {
        Self::from_array([p[0], p[1], p[2], p[3], p[4]])
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.g0, self.g1, self.e0, self.e1, self.s]
    }

    pub fn total(&self) -> f64 {
        self.to_array().iter().sum()
    }

    /// Checks component range and normalization to within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for v in self.to_array() {
            if !v.is_finite() || v < -tol || v > 1.0 + tol {
                return Err(Error::InvalidInput(format!(
                    "population component {v} outside [0, 1]"
                )));
            }
        }
        if (self.total() - 1.0).abs() > tol {
            return Err(Error::InvalidInput(format!(
                "populations sum to {}, not 1",
                self.total()
            )));
        }
        Ok(())
    }

    /// Ideal π pulse on the ground-state spin transition.
    pub fn spin_flipped(&self) -> Self {
        Self {
            g0: self.g1,
            g1: self.g0,
            ..*self
        }
    }

    /// `(g0 + e0) / (g0 + e0 + g1 + e1)`: m_s = 0 fraction of the triplet.
    pub fn spin_polarization(&self) -> f64 {
        let ms0 = self.g0 + self.e0;
        ms0 / (ms0 + self.g1 + self.e1)
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times_ns: Vec<f64>,
    pub states: Vec<Populations>,
}

impl Trajectory {
    pub fn last(&self) -> &Populations {
        self.states.last().expect("trajectory always holds the initial state")
    }
}

/// Mean detected photons per bin for a single measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluorescenceTrace {
    /// Bin width in ns.
    pub dt: f64,
    pub bins: Vec<f64>,
}

impl FluorescenceTrace {
    pub fn new(dt: f64, bins: Vec<f64>) -> Result<Self> {
        let trace = Self { dt, bins };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidInput(format!("bin width must be positive, got {}", self.dt)));
        }
        if let Some((i, v)) = self
            .bins
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidInput(format!("bin {i} holds invalid value {v}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn duration_ns(&self) -> f64 {
        self.dt * self.bins.len() as f64
    }

    /// Sum of the first `n_bins` bins.
    pub fn window_sum(&self, n_bins: usize) -> f64 {
        self.bins.iter().take(n_bins).sum()
    }
}

/// Spin state prepared before readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpinPreparation {
    /// Optically pumped state ("m_s = 0" calibration).
    Ms0,
    /// Pumped state followed by an ideal π pulse ("m_s = 1" calibration).
    Ms1,
    /// Raw pumped state; identical to `Ms0` under calibration-by-preparation.
    Pumped,
}

impl fmt::Display for SpinPreparation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpinPreparation::Ms0 => "ms0",
            SpinPreparation::Ms1 => "ms1",
            SpinPreparation::Pumped => "pumped",
        })
    }
}

impl FromStr for SpinPreparation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ms0" => Ok(SpinPreparation::Ms0),
            "ms1" => Ok(SpinPreparation::Ms1),
            "pumped" => Ok(SpinPreparation::Pumped),
            other => Err(Error::InvalidInput(format!("unknown spin preparation `{other}`"))),
        }
    }
}
