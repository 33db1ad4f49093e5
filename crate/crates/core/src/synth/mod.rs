//! Synthetic histograms and Monte Carlo ensembles.
//!
//! Each repetition draws from its own ChaCha8 stream, derived from the run
//! seed and a stream index, so parallel and serial runs give identical
//! results.

pub mod poisson;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    self, estimate_approx_mle, estimate_exact_mle, estimate_photon_counting, CalibrationPair,
    HistogramData, Method,
};
use crate::photophysics::{FluorescenceTrace, RateModel};

/// Measurements per histogram used when none is given.
pub const DEFAULT_N_MEAS: u64 = 100_000;
/// Ensemble size used when none is given.
pub const DEFAULT_REPETITIONS: usize = 1000;

/// A spin mixture to sample: the state is flipped with probability `p_flip`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub p_flip: f64,
    pub n_meas: u64,
    pub seed: u64,
    /// Mean background photons per bin per measurement.
    #[serde(default)]
    pub background: f64,
}

impl MixtureSpec {
    pub fn new(p_flip: f64, n_meas: u64, seed: u64) -> Self {
        Self {
            p_flip,
            n_meas,
            seed,
            background: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_flip) {
            return Err(Error::InvalidInput(format!(
                "flip probability must lie in [0, 1], got {}",
                self.p_flip
            )));
        }
        if self.n_meas == 0 {
            return Err(Error::InvalidInput("need at least one measurement".into()));
        }
        if !(self.background >= 0.0) || !self.background.is_finite() {
            return Err(Error::InvalidInput(format!(
                "background must be non-negative, got {}",
                self.background
            )));
        }
        Ok(())
    }

    /// `1 - 2p`.
    pub fn s_z(&self) -> f64 {
        1.0 - 2.0 * self.p_flip
    }
}

/// RNG for one independent stream of a seeded run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mean counts per bin, `N (m0 (1 - p) + m1 p) + N · background`.
pub fn expected_bins(cal: &CalibrationPair, spec: &MixtureSpec) -> Vec<f64> {
    let n = spec.n_meas as f64;
    let p = spec.p_flip;
    cal.m0
        .iter()
        .zip(&cal.m1)
        .map(|(x, y)| n * (x * (1.0 - p) + y * p) + n * spec.background)
        .collect()
}

/// Independent Poisson draw per bin, from stream 0 of `spec.seed`.
pub fn sample_histogram(cal: &CalibrationPair, spec: &MixtureSpec) -> Result<HistogramData> {
    sample_histogram_with(cal, spec, &mut stream_rng(spec.seed, 0))
}

pub fn sample_histogram_with<R: Rng + ?Sized>(
    cal: &CalibrationPair,
    spec: &MixtureSpec,
    rng: &mut R,
) -> Result<HistogramData> {
    spec.validate()?;
    cal.validate()?;
    let counts = expected_bins(cal, spec)
        .into_iter()
        .map(|mu| poisson::sample(rng, mu))
        .collect();
    HistogramData::new(cal.dt, counts, spec.n_meas)
}

/// Calibration re-estimated from `n_cal` sampled measurements of each state,
/// for studying calibration noise.
pub fn sample_calibration(cal: &CalibrationPair, n_cal: u64, seed: u64) -> Result<CalibrationPair> {
    if n_cal == 0 {
        return Err(Error::InvalidInput("need at least one calibration measurement".into()));
    }
    let n = n_cal as f64;
    let mut rng0 = stream_rng(seed, 0);
    let mut rng1 = stream_rng(seed, 1);
    let m0 = cal.m0.iter().map(|m| poisson::sample(&mut rng0, n * m) as f64 / n).collect();
    let m1 = cal.m1.iter().map(|m| poisson::sample(&mut rng1, n * m) as f64 / n).collect();
    CalibrationPair::new(cal.dt, m0, m1, Some(n_cal))
}

/// Trace averaged over `n_averages` Poisson-sampled measurements.
pub fn noisy_trace<R: Rng + ?Sized>(
    trace: &FluorescenceTrace,
    n_averages: u64,
    rng: &mut R,
) -> FluorescenceTrace {
    let n = n_averages as f64;
    FluorescenceTrace {
        dt: trace.dt,
        bins: trace
            .bins
            .iter()
            .map(|m| poisson::sample(rng, n * m) as f64 / n)
            .collect(),
    }
}

/// Ensemble statistics for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: Method,
    pub mean: f64,
    /// Sample standard deviation over repetitions.
    pub std: f64,
    /// Predicted standard deviation at the true `S_z`.
    pub predicted_std: f64,
    pub repetitions: usize,
}

/// Ensemble result at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    /// Microwave duration for Rabi sweeps.
    pub duration_ns: Option<f64>,
    pub p_flip: f64,
    pub s_z_true: f64,
    pub n_meas: u64,
    pub window_bins: usize,
    pub stats: Vec<MethodStats>,
}

impl MonteCarloResult {
    pub fn get(&self, method: Method) -> Option<&MethodStats> {
        self.stats.iter().find(|s| s.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_meas: u64,
    pub repetitions: usize,
    pub seed: u64,
    #[serde(default)]
    pub background: f64,
    /// Photon-counting window; the SNR-optimal window when `None`.
    pub window_bins: Option<usize>,
    pub methods: Vec<Method>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_meas: DEFAULT_N_MEAS,
            repetitions: DEFAULT_REPETITIONS,
            seed: 0,
            background: 0.0,
            window_bins: None,
            methods: Method::ALL.to_vec(),
        }
    }
}

/// Runs `config.repetitions` independent experiments on a mixture with flip
/// probability `p_flip`. Repetition `r` uses stream `(point << 32) | r`.
pub fn run_ensemble(
    cal: &CalibrationPair,
    p_flip: f64,
    config: &EnsembleConfig,
    point: u32,
) -> Result<MonteCarloResult> {
    if config.repetitions < 2 {
        return Err(Error::InvalidInput("an ensemble needs at least two repetitions".into()));
    }
    let spec = MixtureSpec {
        p_flip,
        n_meas: config.n_meas,
        seed: config.seed,
        background: config.background,
    };
    spec.validate()?;
    let window = match config.window_bins {
        Some(w) => w,
        None => estimators::optimal_window(cal, config.n_meas)?,
    };

    let estimates: Vec<Vec<f64>> = (0..config.repetitions as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(config.seed, (u64::from(point) << 32) | r);
            let data = sample_histogram_with(cal, &spec, &mut rng)?;
            config
                .methods
                .iter()
                .map(|m| {
                    Ok(match m {
                        Method::ExactMle => estimate_exact_mle(&data, cal)?,
                        Method::ApproxMle => estimate_approx_mle(&data, cal)?,
                        Method::PhotonCounting => estimate_photon_counting(&data, cal, window)?,
                    }
                    .s_z)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let s_z = spec.s_z();
    let stats = config
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let column: Vec<f64> = estimates.iter().map(|row| row[k]).collect();
            let (mean, std) = mean_and_std(&column);
            let variance = match method {
                Method::ExactMle | Method::ApproxMle => {
                    estimators::predicted_variance_approx(cal, config.n_meas, s_z)?
                }
                Method::PhotonCounting => {
                    estimators::predicted_variance_photon_counting(cal, config.n_meas, window, s_z)?
                }
            };
            Ok(MethodStats {
                method,
                mean,
                std,
                predicted_std: variance.sqrt(),
                repetitions: column.len(),
            })
        })
        .collect::<Result<_>>()?;

    Ok(MonteCarloResult {
        duration_ns: None,
        p_flip,
        s_z_true: s_z,
        n_meas: config.n_meas,
        window_bins: window,
        stats,
    })
}

pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Flip probability after driving for `duration_ns` with π time `t_pi_ns`.
pub fn rabi_flip_probability(duration_ns: f64, t_pi_ns: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * duration_ns / t_pi_ns).sin().powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiConfig {
    pub t_pi_ns: f64,
    pub durations_ns: Vec<f64>,
    pub ensemble: EnsembleConfig,
}

impl RabiConfig {
    /// Durations from 0 to 2 t_pi in `points` equal steps.
    pub fn evenly_spaced(t_pi_ns: f64, points: usize, ensemble: EnsembleConfig) -> Self {
        let durations_ns = (0..points)
            .map(|i| 2.0 * t_pi_ns * i as f64 / (points.max(2) - 1) as f64)
            .collect();
        Self {
            t_pi_ns,
            durations_ns,
            ensemble,
        }
    }
}

/// Monte Carlo over a Rabi oscillation: one ensemble per microwave duration.
pub fn rabi_sweep(cal: &CalibrationPair, config: &RabiConfig) -> Result<Vec<MonteCarloResult>> {
    if !(config.t_pi_ns > 0.0) {
        return Err(Error::InvalidInput(format!(
            "pi time must be positive, got {}",
            config.t_pi_ns
        )));
    }
    config
        .durations_ns
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if !(t >= 0.0) {
                return Err(Error::InvalidInput(format!("negative duration {t}")));
            }
            let p = rabi_flip_probability(t, config.t_pi_ns);
            let mut result = run_ensemble(cal, p, &config.ensemble, i as u32)?;
            result.duration_ns = Some(t);
            Ok(result)
        })
        .collect()
}

/// Predicted single-measurement SNRs at one laser intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrPoint {
    /// Multiples of the saturation intensity.
    pub intensity: f64,
    /// Excitation rate (MHz).
    pub excitation: f64,
    pub snr_approx: f64,
    pub snr_photon_counting: f64,
    pub window_bins: usize,
    /// `100 (SNR_A / SNR_PC - 1)`.
    pub percent_gap: f64,
}

/// SNR of both estimators at `N = 1` from noiseless model calibrations.
pub fn snr_intensity_sweep(
    model: &RateModel,
    intensities: &[f64],
    trace_bins: usize,
    dt: f64,
) -> Result<Vec<SnrPoint>> {
    if let Some(bad) = intensities.iter().find(|i| !(**i > 0.0) || !i.is_finite()) {
        return Err(Error::InvalidInput(format!("intensities must be positive, got {bad}")));
    }
    let rsat = model.saturation_rate()?;
    intensities
        .par_iter()
        .map(|&intensity| {
            let driven = model.with_excitation(intensity * rsat);
            let cal = CalibrationPair::from_model(&driven, trace_bins, dt)?;
            let snr_a = estimators::snr_approx(&cal, 1)?;
            let window = estimators::optimal_window(&cal, 1)?;
            let snr_pc = estimators::snr_photon_counting(&cal, 1, window)?;
            Ok(SnrPoint {
                intensity,
                excitation: driven.excitation,
                snr_approx: snr_a,
                snr_photon_counting: snr_pc,
                window_bins: window,
                percent_gap: 100.0 * (snr_a / snr_pc - 1.0),
            })
        })
        .collect()
}
