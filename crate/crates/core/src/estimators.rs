//! Spin-projection estimators for binned photon-arrival histograms.
//!
//! Given calibration traces `m0`, `m1` (mean photons per bin for one
//! measurement of each reference preparation) and a histogram `n` summed over
//! `N` measurements, each bin has mean `a_i + b_i S_z` where
//! `a_i = N (m0_i + m1_i) / 2` and `b_i = N (m0_i - m1_i) / 2`.
//!
//! Three estimators are provided:
//!
//! * exact MLE: root of the score of the Gaussian likelihood whose variance
//!   equals its mean,
//! * approximate MLE: the closed form obtained by freezing the variance at
//!   `a_i`, a weighted sum with weights `b_i / a_i`,
//! * photon counting: total counts in the first `window` bins compared with
//!   the calibration totals.
//!
//! Bins with `a_i = 0` carry no information and are skipped everywhere.
//! Estimates are not clipped to `[-1, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photophysics::{FluorescenceTrace, RateModel};

/// Calibration means are per single measurement and must be well below one.
pub const MAX_MEAN_PER_BIN: f64 = 0.5;

/// Initial exact-MLE search interval is `[-1 - δ, 1 + δ]`.
const BRACKET_MARGIN: f64 = 0.5;
/// Fallback search interval after the first bracket fails.
const WIDE_BRACKET: f64 = 3.0;
const ROOT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    /// Bin width in ns.
    pub dt: f64,
    /// Mean photons per bin for one measurement of the `ms0` preparation.
    pub m0: Vec<f64>,
    /// Same for the `ms1` preparation.
    pub m1: Vec<f64>,
    /// Repetitions the calibration was averaged over; `None` for model traces.
    #[serde(default)]
    pub n_cal: Option<u64>,
}

impl CalibrationPair {
    pub fn new(dt: f64, m0: Vec<f64>, m1: Vec<f64>, n_cal: Option<u64>) -> Result<Self> {
        let cal = Self { dt, m0, m1, n_cal };
        cal.validate()?;
        Ok(cal)
    }

    pub fn from_traces(
        ms0: &FluorescenceTrace,
        ms1: &FluorescenceTrace,
        n_cal: Option<u64>,
    ) -> Result<Self> {
        if (ms0.dt - ms1.dt).abs() > 1e-9 * ms0.dt {
            return Err(Error::InvalidInput(format!(
                "calibration traces have different bin widths ({} vs {})",
                ms0.dt, ms1.dt
            )));
        }
        Self::new(ms0.dt, ms0.bins.clone(), ms1.bins.clone(), n_cal)
    }

    /// Noiseless calibration simulated from the rate model.
    pub fn from_model(model: &RateModel, n_bins: usize, dt: f64) -> Result<Self> {
        let (ms0, ms1) = model.calibration_traces(n_bins, dt)?;
        Self::from_traces(&ms0, &ms1, None)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidInput(format!("bin width must be positive, got {}", self.dt)));
        }
        if self.m0.len() != self.m1.len() {
            return Err(Error::InvalidInput(format!(
                "m0 has {} bins but m1 has {}",
                self.m0.len(),
                self.m1.len()
            )));
        }
        if self.m0.is_empty() {
            return Err(Error::InvalidInput("calibration has no bins".into()));
        }
        for (name, trace) in [("m0", &self.m0), ("m1", &self.m1)] {
            if let Some((i, v)) = trace
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v >= MAX_MEAN_PER_BIN)
            {
                return Err(Error::InvalidInput(format!(
                    "{name}[{i}] = {v} outside [0, {MAX_MEAN_PER_BIN})"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.m0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m0.is_empty()
    }

    /// True when `m0` and `m1` are identical in every bin.
    pub fn has_no_contrast(&self) -> bool {
        self.m0.iter().zip(&self.m1).all(|(a, b)| a == b)
    }
}

/// Photon counts per bin summed over `n_meas` measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramData {
    /// Bin width in ns.
    pub dt: f64,
    pub counts: Vec<u64>,
    pub n_meas: u64,
}

impl HistogramData {
    pub fn new(dt: f64, counts: Vec<u64>, n_meas: u64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidInput(format!("bin width must be positive, got {dt}")));
        }
        if n_meas == 0 {
            return Err(Error::InvalidInput("histogram needs at least one measurement".into()));
        }
        Ok(Self { dt, counts, n_meas })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Errors unless the histogram matches the calibration in bin count and width.
    pub fn check_against(&self, cal: &CalibrationPair) -> Result<()> {
        cal.validate()?;
        if self.n_meas == 0 {
            return Err(Error::InvalidInput("histogram needs at least one measurement".into()));
        }
        if self.counts.len() != cal.len() {
            return Err(Error::InvalidInput(format!(
                "histogram has {} bins but calibration has {}",
                self.counts.len(),
                cal.len()
            )));
        }
        if (self.dt - cal.dt).abs() > 1e-9 * cal.dt {
            return Err(Error::InvalidInput(format!(
                "histogram bin width {} ns differs from calibration {} ns",
                self.dt, cal.dt
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExactMle,
    ApproxMle,
    PhotonCounting,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ExactMle, Method::ApproxMle, Method::PhotonCounting];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::ExactMle => "exact_mle",
            Method::ApproxMle => "approx_mle",
            Method::PhotonCounting => "photon_counting",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "exact_mle" => Ok(Method::ExactMle),
            "approx" | "approx_mle" => Ok(Method::ApproxMle),
            "counting" | "photon_counting" => Ok(Method::PhotonCounting),
            other => Err(Error::InvalidInput(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub method: Method,
    /// Estimated population difference `p(0) - p(1)`, unclipped.
    pub s_z: f64,
    pub predicted_std: f64,
    /// Counting window, photon counting only.
    pub window_bins: Option<usize>,
    /// `(1 - s_z) / 2`, unclipped like `s_z`.
    pub flip_probability: f64,
}

impl EstimatorReport {
    fn new(method: Method, s_z: f64, variance: f64, window_bins: Option<usize>) -> Self {
        Self {
            method,
            s_z,
            predicted_std: variance.sqrt(),
            window_bins,
            flip_probability: (1.0 - s_z) / 2.0,
        }
    }
}

/// Per-bin `a_i` (mean at `S_z = 0`) and `b_i` (half the contrast), in counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Weights {
    /// Bins with `a_i = 0`, which every estimator skips.
    pub fn excluded(&self) -> Vec<usize> {
        self.a
            .iter()
            .enumerate()
            .filter(|(_, a)| **a <= 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    fn active(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.a
            .iter()
            .zip(&self.b)
            .enumerate()
            .filter(|(_, (a, _))| **a > 0.0)
            .map(|(i, (a, b))| (i, *a, *b))
    }

    /// `Σ b_i² / a_i`.
    pub fn information(&self) -> f64 {
        self.active().map(|(_, a, b)| b * b / a).sum()
    }

    /// Exact-MLE score `d(-ln P)/dS_z`. Bins with `a_i + b_i S_z <= 0` make
    /// it undefined; callers keep `S_z` inside [`Weights::domain`].
    pub fn score(&self, counts: &[u64], s_z: f64) -> f64 {
        self.active()
            .filter(|(_, _, b)| *b != 0.0)
            .map(|(i, a, b)| {
                let n = counts[i] as f64;
                let mu = a + b * s_z;
                0.5 * b * (1.0 + (a - n * n + b * s_z) / (mu * mu))
            })
            .sum()
    }

    /// Open interval of `S_z` on which every bin mean is positive.
    pub fn domain(&self) -> (f64, f64) {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for (_, a, b) in self.active() {
            if b > 0.0 {
                lo = lo.max(-a / b);
            } else if b < 0.0 {
                hi = hi.min(-a / b);
            }
        }
        (lo, hi)
    }
}

pub fn weights(cal: &CalibrationPair, n_meas: u64) -> Weights {
    let half_n = n_meas as f64 / 2.0;
    let a = cal.m0.iter().zip(&cal.m1).map(|(x, y)| half_n * (x + y)).collect();
    let b = cal.m0.iter().zip(&cal.m1).map(|(x, y)| half_n * (x - y)).collect();
    Weights { a, b }
}

/// Maximum-likelihood estimate by bracketing and bisecting the score.
pub fn estimate_exact_mle(data: &HistogramData, cal: &CalibrationPair) -> Result<EstimatorReport> {
    data.check_against(cal)?;
    let w = weights(cal, data.n_meas);
    if w.information() == 0.0 {
        return Err(Error::NoContrast);
    }
    let s_z = solve_score(&w, &data.counts)?;
    let variance = approx_variance(&w, s_z);
    Ok(EstimatorReport::new(Method::ExactMle, s_z, variance, None))
}

fn solve_score(w: &Weights, counts: &[u64]) -> Result<f64> {
    let (dom_lo, dom_hi) = w.domain();
    let inset = |x: f64| 1e-9 * (1.0 + x.abs());
    let mut last = (0.0, 0.0);
    for half_width in [1.0 + BRACKET_MARGIN, WIDE_BRACKET] {
        let lo = (-half_width).max(dom_lo + inset(dom_lo));
        let hi = half_width.min(dom_hi - inset(dom_hi));
        last = (lo, hi);
        if lo >= hi {
            continue;
        }
        let f_lo = w.score(counts, lo);
        let f_hi = w.score(counts, hi);
        // -ln P is minimized where the score crosses zero from below
        if f_lo < 0.0 && f_hi > 0.0 {
            return Ok(bisect(|s| w.score(counts, s), lo, hi));
        }
        if f_lo == 0.0 {
            return Ok(lo);
        }
        if f_hi == 0.0 {
            return Ok(hi);
        }
    }
    Err(Error::NoRoot { lo: last.0, hi: last.1 })
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    while hi - lo > ROOT_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v == 0.0 {
            return mid;
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Closed-form approximate MLE, `Σ (b/a)(n - a) / Σ b²/a`.
pub fn estimate_approx_mle(data: &HistogramData, cal: &CalibrationPair) -> Result<EstimatorReport> {
    data.check_against(cal)?;
    let w = weights(cal, data.n_meas);
    let counts: Vec<f64> = data.counts.iter().map(|&c| c as f64).collect();
    let s_z = weighted_estimate(&w, &counts)?;
    Ok(EstimatorReport::new(
        Method::ApproxMle,
        s_z,
        approx_variance(&w, s_z),
        None,
    ))
}

/// Approximate MLE applied to real-valued per-bin counts, such as expected
/// means. `counts` must have one entry per calibration bin.
pub fn estimate_approx_mle_from_means(counts: &[f64], cal: &CalibrationPair, n_meas: u64) -> Result<f64> {
    cal.validate()?;
    if counts.len() != cal.len() {
        return Err(Error::InvalidInput(format!(
            "{} counts for {} calibration bins",
            counts.len(),
            cal.len()
        )));
    }
    weighted_estimate(&weights(cal, n_meas), counts)
}

fn weighted_estimate(w: &Weights, counts: &[f64]) -> Result<f64> {
    let information = w.information();
    if information == 0.0 {
        return Err(Error::NoContrast);
    }
    let numerator: f64 = w.active().map(|(i, a, b)| b / a * (counts[i] - a)).sum();
    Ok(numerator / information)
}

/// Photon-counting estimate from the first `window_bins` bins.
pub fn estimate_photon_counting(
    data: &HistogramData,
    cal: &CalibrationPair,
    window_bins: usize,
) -> Result<EstimatorReport> {
    data.check_against(cal)?;
    check_window(cal, window_bins)?;
    let n = data.n_meas as f64;
    let eta: f64 = data.counts[..window_bins].iter().map(|&c| c as f64).sum();
    let eta0 = n * cal.m0[..window_bins].iter().sum::<f64>();
    let eta1 = n * cal.m1[..window_bins].iter().sum::<f64>();
    if eta0 == eta1 {
        return Err(Error::NoContrast);
    }
    let s_z = 2.0 * (eta - eta1) / (eta0 - eta1) - 1.0;
    let variance = counting_variance(cal, data.n_meas, window_bins, s_z);
    Ok(EstimatorReport::new(
        Method::PhotonCounting,
        s_z,
        variance,
        Some(window_bins),
    ))
}

fn check_window(cal: &CalibrationPair, window_bins: usize) -> Result<()> {
    if window_bins == 0 || window_bins > cal.len() {
        return Err(Error::InvalidInput(format!(
            "window must cover 1..={} bins, got {window_bins}",
            cal.len()
        )));
    }
    Ok(())
}

/// Variance of the approximate MLE for a state with projection `s_z`,
/// `Σ (b/a)² (a + b S_z) / (Σ b²/a)²`. `s_z` is clamped to the physical
/// range so the prediction is always a variance of a real state.
fn approx_variance(w: &Weights, s_z: f64) -> f64 {
    let s = s_z.clamp(-1.0, 1.0);
    let information = w.information();
    let spread: f64 = w.active().map(|(_, a, b)| (b / a).powi(2) * (a + b * s)).sum();
    spread / (information * information)
}

fn counting_variance(cal: &CalibrationPair, n_meas: u64, window_bins: usize, s_z: f64) -> f64 {
    let s = s_z.clamp(-1.0, 1.0);
    let n = n_meas as f64;
    let (mut mean, mut contrast) = (0.0, 0.0);
    for (x, y) in cal.m0[..window_bins].iter().zip(&cal.m1[..window_bins]) {
        mean += n * (x * (1.0 + s) + y * (1.0 - s)) / 2.0;
        contrast += n * (x - y);
    }
    4.0 * mean / (contrast * contrast)
}

pub fn predicted_variance_approx(cal: &CalibrationPair, n_meas: u64, s_z: f64) -> Result<f64> {
    cal.validate()?;
    let w = weights(cal, n_meas);
    if w.information() == 0.0 {
        return Err(Error::NoContrast);
    }
    Ok(approx_variance(&w, s_z))
}

pub fn predicted_variance_photon_counting(
    cal: &CalibrationPair,
    n_meas: u64,
    window_bins: usize,
    s_z: f64,
) -> Result<f64> {
    cal.validate()?;
    check_window(cal, window_bins)?;
    let contrast: f64 = cal.m0[..window_bins]
        .iter()
        .zip(&cal.m1[..window_bins])
        .map(|(x, y)| x - y)
        .sum();
    if contrast == 0.0 {
        return Err(Error::NoContrast);
    }
    Ok(counting_variance(cal, n_meas, window_bins, s_z))
}

/// `√(2N) √(Σ (m0 - m1)² / (m0 + m1))`.
pub fn snr_approx(cal: &CalibrationPair, n_meas: u64) -> Result<f64> {
    cal.validate()?;
    let sum: f64 = cal
        .m0
        .iter()
        .zip(&cal.m1)
        .filter(|(x, y)| *x + *y > 0.0)
        .map(|(x, y)| (x - y).powi(2) / (x + y))
        .sum();
    if sum == 0.0 {
        return Err(Error::NoContrast);
    }
    Ok((2.0 * n_meas as f64).sqrt() * sum.sqrt())
}

/// `√(2N) Σ_w (m0 - m1) / √(Σ_w (m0 + m1))` over the first `window_bins` bins.
pub fn snr_photon_counting(cal: &CalibrationPair, n_meas: u64, window_bins: usize) -> Result<f64> {
    cal.validate()?;
    check_window(cal, window_bins)?;
    let (mut diff, mut total) = (0.0, 0.0);
    for (x, y) in cal.m0[..window_bins].iter().zip(&cal.m1[..window_bins]) {
        diff += x - y;
        total += x + y;
    }
    if diff == 0.0 || total == 0.0 {
        return Err(Error::NoContrast);
    }
    Ok((2.0 * n_meas as f64).sqrt() * diff / total.sqrt())
}

/// Counting window maximizing the photon-counting SNR, by exhaustive scan.
/// Ties go to the shorter window.
pub fn optimal_window(cal: &CalibrationPair, n_meas: u64) -> Result<usize> {
    cal.validate()?;
    if cal.has_no_contrast() {
        return Err(Error::NoContrast);
    }
    let scale = (2.0 * n_meas as f64).sqrt();
    let (mut diff, mut total) = (0.0, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for (i, (x, y)) in cal.m0.iter().zip(&cal.m1).enumerate() {
        diff += x - y;
        total += x + y;
        if total == 0.0 {
            continue;
        }
        let snr = scale * diff / total.sqrt();
        if best.is_none_or(|(_, b)| snr > b) {
            best = Some((i + 1, snr));
        }
    }
    best.map(|(w, _)| w).ok_or(Error::NoContrast)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cal(m0: &[f64], m1: &[f64]) -> CalibrationPair {
        CalibrationPair::new(8.33, m0.to_vec(), m1.to_vec(), None).unwrap()
    }

    fn sample_cal() -> CalibrationPair {
        // decaying contrast on a flat background, shaped like a readout
        let n = 60;
        let m0: Vec<f64> = (0..n).map(|i| 2e-3 * (1.0 + 0.4 * (-(i as f64) / 12.0).exp())).collect();
        let m1: Vec<f64> = (0..n).map(|i| 2e-3 * (1.0 - 0.2 * (-(i as f64) / 15.0).exp())).collect();
        cal(&m0, &m1)
    }

    fn histogram_at(cal: &CalibrationPair, n_meas: u64, s_z: f64) -> Vec<f64> {
        let w = weights(cal, n_meas);
        w.a.iter().zip(&w.b).map(|(a, b)| a + b * s_z).collect()
    }

    /// Approximate MLE evaluated on real-valued counts.
    fn approx_on(cal: &CalibrationPair, n_meas: u64, counts: &[f64]) -> f64 {
        let w = weights(cal, n_meas);
        let num: f64 = w.a.iter().zip(&w.b).zip(counts).filter(|((a, _), _)| **a > 0.0).map(|((a, b), n)| b / a * (n - a)).sum();
        num / w.information()
    }

    #[test]
    fn weights_follow_definition() {
        let c = cal(&[2e-4, 1e-3], &[1e-4, 1e-3]);
        let w = weights(&c, 1_000_000);
        assert!((w.a[0] - 150.0).abs() < 1e-9 && (w.b[0] - 50.0).abs() < 1e-9);
        assert_eq!(w.b[1], 0.0);
        let c = cal(&[0.0, 1e-3], &[0.0, 2e-3]);
        assert_eq!(weights(&c, 10).excluded(), vec![0]);
    }

    #[test]
    fn calibration_rejects_bad_shapes() {
        assert!(CalibrationPair::new(8.33, vec![1e-3; 3], vec![1e-3; 2], None).is_err());
        assert!(CalibrationPair::new(8.33, vec![0.6], vec![1e-3], None).is_err());
        assert!(CalibrationPair::new(8.33, vec![-1e-3], vec![1e-3], None).is_err());
    }

    #[test]
    fn approx_mle_noiseless_identities() {
        let c = sample_cal();
        let n = 1_000_000;
        for (counts, expect) in [
            (c.m0.iter().map(|m| (m * n as f64) as u64).collect::<Vec<_>>(), 1.0),
            (c.m1.iter().map(|m| (m * n as f64) as u64).collect::<Vec<_>>(), -1.0),
        ] {
            // counts are truncated to integers, so compare loosely here and
            // exactly on real-valued counts below
            let h = HistogramData::new(8.33, counts, n).unwrap();
            let r = estimate_approx_mle(&h, &c).unwrap();
            assert!((r.s_z - expect).abs() < 0.01);
        }
        for s in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            let est = approx_on(&c, n, &histogram_at(&c, n, s));
            assert!((est - s).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_mle_on_noiseless_input() {
        let c = sample_cal();
        let n = 10_000_000;
        let w = weights(&c, n);
        // n_i = a_i: the root sits near zero, offset by the variance term
        let counts: Vec<u64> = w.a.iter().map(|a| a.round() as u64).collect();
        let h = HistogramData::new(8.33, counts.clone(), n).unwrap();
        let r = estimate_exact_mle(&h, &c).unwrap();
        assert!(r.s_z.abs() < 5e-3, "{}", r.s_z);
        assert!(w.score(&counts, r.s_z).abs() < 1e-8 * w.information());
        // brute force: -ln P on a fine grid has its minimum at the root
        let neg_log_p = |s: f64| -> f64 {
            w.a.iter().zip(&w.b).zip(&counts).map(|((a, b), n)| {
                let mu = a + b * s;
                0.5 * mu.ln() + (*n as f64 - mu).powi(2) / (2.0 * mu)
            }).sum()
        };
        let grid_min = (0..20001)
            .map(|k| -0.05 + 1e-5 * k as f64)
            .min_by(|x, y| neg_log_p(*x).total_cmp(&neg_log_p(*y)))
            .unwrap();
        assert!((grid_min - r.s_z).abs() < 2e-5);

        let counts: Vec<u64> = c.m0.iter().map(|m| (m * n as f64).round() as u64).collect();
        let h = HistogramData::new(8.33, counts, n).unwrap();
        assert!((estimate_exact_mle(&h, &c).unwrap().s_z - 1.0).abs() < 5e-3);
    }

    #[test]
    fn exact_mle_score_is_finite_difference_of_likelihood() {
        let c = sample_cal();
        let n = 100_000;
        let w = weights(&c, n);
        let counts: Vec<u64> = w.a.iter().map(|a| (a * 1.05) as u64).collect();
        let neg_log_p = |s: f64| -> f64 {
            w.a.iter().zip(&w.b).zip(&counts).map(|((a, b), n)| {
                let mu = a + b * s;
                0.5 * (2.0 * std::f64::consts::PI * mu).ln() + (*n as f64 - mu).powi(2) / (2.0 * mu)
            }).sum()
        };
        for s in [-0.7, 0.0, 0.4] {
            let h = 1e-5;
            let fd = (neg_log_p(s + h) - neg_log_p(s - h)) / (2.0 * h);
            assert!((fd - w.score(&counts, s)).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn exact_mle_rejects_missing_contrast() {
        let c = cal(&[1e-3; 4], &[1e-3; 4]);
        let h = HistogramData::new(8.33, vec![10; 4], 10_000).unwrap();
        assert!(matches!(estimate_exact_mle(&h, &c), Err(Error::NoContrast)));
        assert!(matches!(estimate_approx_mle(&h, &c), Err(Error::NoContrast)));
        assert!(matches!(optimal_window(&c, 10), Err(Error::NoContrast)));
    }

    #[test]
    fn exact_mle_reports_missing_root() {
        // every bin empty in a bright calibration: the likelihood keeps
        // decreasing towards the dark edge of the domain
        let c = cal(&[1e-2, 1e-2], &[0.0, 0.0]);
        let h = HistogramData::new(8.33, vec![0, 0], 1000).unwrap();
        assert!(matches!(estimate_exact_mle(&h, &c), Err(Error::NoRoot { .. })));
    }

    #[test]
    fn histogram_must_match_calibration() {
        let c = sample_cal();
        let h = HistogramData::new(8.33, vec![0; 10], 10).unwrap();
        assert!(estimate_approx_mle(&h, &c).is_err());
        let h = HistogramData::new(4.0, vec![0; c.len()], 10).unwrap();
        assert!(estimate_approx_mle(&h, &c).is_err());
    }

    #[test]
    fn photon_counting_identities() {
        let c = sample_cal();
        let n = 1000;
        let w = 10;
        let eta0: f64 = c.m0[..w].iter().sum::<f64>() * n as f64;
        let eta1: f64 = c.m1[..w].iter().sum::<f64>() * n as f64;
        // put all counts in bin 0; only the window total matters
        let mk = |eta: f64| HistogramData::new(8.33, {
            let mut v = vec![0; c.len()];
            v[0] = eta.round() as u64;
            v
        }, n).unwrap();
        let r = estimate_photon_counting(&mk(eta0), &c, w).unwrap();
        assert!((r.s_z - (2.0 * (eta0.round() - eta1) / (eta0 - eta1) - 1.0)).abs() < 1e-12);
        let mid = 0.5 * (eta0 + eta1);
        let s_mid = 2.0 * (mid.round() - eta1) / (eta0 - eta1) - 1.0;
        assert!((estimate_photon_counting(&mk(mid), &c, w).unwrap().s_z - s_mid).abs() < 1e-12);
        assert_eq!(r.window_bins, Some(w));
        assert!((r.flip_probability - (1.0 - r.s_z) / 2.0).abs() < 1e-15);
        assert!(estimate_photon_counting(&mk(mid), &c, 0).is_err());
        assert!(estimate_photon_counting(&mk(mid), &c, c.len() + 1).is_err());
    }

    #[test]
    fn photon_counting_exact_at_calibration_totals() {
        // integer-valued calibration totals make the identities exact
        let c = cal(&[3e-3, 2e-3, 1e-3], &[1e-3, 1e-3, 0.0]);
        let n = 1000;
        let h0 = HistogramData::new(8.33, vec![3, 2, 1], n).unwrap();
        assert!((estimate_photon_counting(&h0, &c, 3).unwrap().s_z - 1.0).abs() < 1e-12);
        let hmid = HistogramData::new(8.33, vec![2, 2, 0], n).unwrap();
        assert!(estimate_photon_counting(&hmid, &c, 3).unwrap().s_z.abs() < 1e-12);
    }

    #[test]
    fn single_bin_variance_reduces() {
        let c = cal(&[0.0, 3e-3, 0.0], &[0.0, 1e-3, 0.0]);
        let n = 1000;
        let (a, b) = (2.0, 1.0);
        for s in [-1.0, 0.3, 1.0] {
            let v = predicted_variance_approx(&c, n, s).unwrap();
            assert!((v - a / (b * b) * (1.0 + b / a * s)).abs() < 1e-12);
        }
    }

    #[test]
    fn brighter_state_is_noisier() {
        let c = sample_cal();
        let up = predicted_variance_approx(&c, 1000, 1.0).unwrap();
        let down = predicted_variance_approx(&c, 1000, -1.0).unwrap();
        assert!(up > down);
    }

    #[test]
    fn snr_single_bin_and_scaling() {
        let c = cal(&[3e-3], &[1e-3]);
        let snr = snr_approx(&c, 1000).unwrap();
        let expect = (2.0f64 * 1000.0).sqrt() * 2e-3 / 4e-3f64.sqrt();
        assert!((snr - expect).abs() < 1e-12);
        assert!((snr_photon_counting(&c, 1000, 1).unwrap() - expect).abs() < 1e-12);
        let c = sample_cal();
        let r = snr_approx(&c, 4000).unwrap() / snr_approx(&c, 1000).unwrap();
        assert!((r - 2.0).abs() < 1e-12);
        let r = snr_photon_counting(&c, 4000, 7).unwrap() / snr_photon_counting(&c, 1000, 7).unwrap();
        assert!((r - 2.0).abs() < 1e-12);
    }

    #[test]
    fn snr_is_two_over_mean_noise() {
        // SNR = 2 / sqrt(variance averaged uniformly over S_z in [-1, 1])
        let c = sample_cal();
        let n = 5000;
        let k = 2001;
        let mean_var: f64 = (0..k)
            .map(|i| predicted_variance_approx(&c, n, -1.0 + 2.0 * i as f64 / (k - 1) as f64).unwrap())
            .sum::<f64>() / k as f64;
        assert!((2.0 / mean_var.sqrt() / snr_approx(&c, n).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn window_stops_where_contrast_ends() {
        let mut m0 = vec![1e-3; 30];
        let m1 = vec![1e-3; 30];
        for v in m0.iter_mut().take(5) {
            *v = 2e-3;
        }
        assert!(optimal_window(&cal(&m0, &m1), 100).unwrap() <= 5);
    }

    #[test]
    fn window_ties_go_short() {
        // identical SNR for windows 1 and 4 (contrast 1 vs 2, total 1 vs 4)
        let c = cal(&[1e-3, 0.0, 0.0, 2e-3], &[0.0, 0.0, 0.0, 1e-3]);
        let s1 = snr_photon_counting(&c, 10, 1).unwrap();
        let s4 = snr_photon_counting(&c, 10, 4).unwrap();
        assert!((s1 - s4).abs() < 1e-15 * s1);
        assert_eq!(optimal_window(&c, 10).unwrap(), 1);
    }

    fn arb_cal() -> impl Strategy<Value = CalibrationPair> {
        (1usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(1e-5f64..1e-2, n),
                proptest::collection::vec(-0.9f64..0.9, n),
            )
                .prop_map(|(base, contrast)| {
                    let m0 = base.iter().zip(&contrast).map(|(b, c)| b * (1.0 + c)).collect();
                    let m1 = base.iter().zip(&contrast).map(|(b, c)| b * (1.0 - c)).collect();
                    CalibrationPair::new(8.33, m0, m1, None).unwrap()
                })
        })
        .prop_filter("needs contrast", |c| !c.has_no_contrast())
    }

    proptest! {
        #[test]
        fn approx_mle_is_unbiased_on_noiseless_input(c in arb_cal(), s in -1.0f64..1.0) {
            let n = 100_000;
            let est = approx_on(&c, n, &histogram_at(&c, n, s));
            prop_assert!((est - s).abs() < 1e-12);
        }

        #[test]
        fn approx_mle_is_affine(c in arb_cal(), alpha in 0.0f64..1.0, s1 in -1.0f64..1.0, s2 in -1.0f64..1.0) {
            let n = 10_000;
            let h1: Vec<f64> = histogram_at(&c, n, s1).iter().enumerate().map(|(i, v)| v + (i % 3) as f64).collect();
            let h2: Vec<f64> = histogram_at(&c, n, s2).iter().enumerate().map(|(i, v)| v * 0.9 + (i % 5) as f64).collect();
            let mix: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
            let lhs = approx_on(&c, n, &mix);
            let rhs = alpha * approx_on(&c, n, &h1) + (1.0 - alpha) * approx_on(&c, n, &h2);
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
        }

        #[test]
        fn weighted_snr_dominates_every_window(c in arb_cal()) {
            let a = snr_approx(&c, 1000).unwrap();
            for w in 1..=c.len() {
                if let Ok(pc) = snr_photon_counting(&c, 1000, w) {
                    prop_assert!(a >= pc * (1.0 - 1e-12), "window {}: {} < {}", w, a, pc);
                }
            }
        }

        #[test]
        fn optimal_window_is_brute_force_argmax(c in arb_cal()) {
            let best = optimal_window(&c, 1000).unwrap();
            let mut brute = (0, f64::NEG_INFINITY);
            for w in 1..=c.len() {
                let d: f64 = (0..w).map(|i| c.m0[i] - c.m1[i]).sum();
                let t: f64 = (0..w).map(|i| c.m0[i] + c.m1[i]).sum();
                let snr = (2000.0f64).sqrt() * d / t.sqrt();
                if snr > brute.1 { brute = (w, snr); }
            }
            prop_assert_eq!(best, brute.0);
        }
    }
}
