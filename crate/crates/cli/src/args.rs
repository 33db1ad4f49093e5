use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nvreadout::photophysics::{SpinPreparation, DEFAULT_BIN_WIDTH_NS};
use nvreadout::presets::READOUT_INTENSITY;
use nvreadout::{Error, Result};
use serde::Serialize;

/// Intensities of the default SNR sweep, in units of the saturation intensity.
pub const DEFAULT_SWEEP: &str = "0.1,0.2,0.3,0.5,0.75,1,1.5,2,3,4,5,7,10";

#[derive(Debug, Parser, Serialize)]
#[command(name = "nvreadout", version, about = "Time-resolved NV spin readout toolkit")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file; standard output when omitted.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Output format; inferred from the output extension when omitted.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Mean fluorescence trace of one spin preparation.
    Simulate(SimulateArgs),
    /// Calibration pair (ms0 and ms1 traces) from a rate model.
    Calibration(CalibrationArgs),
    /// Poisson histogram of a spin mixture.
    Sample(SampleArgs),
    /// Spin projection from a histogram and a calibration.
    Estimate(EstimateArgs),
    /// Monte Carlo ensembles of the estimators.
    #[command(subcommand)]
    MonteCarlo(MonteCarloCommand),
    /// Predicted SNR of both estimators against laser intensity.
    SnrSweep(SnrSweepArgs),
    /// Simultaneous rate-model fit to traces at several intensities.
    Fit(FitArgs),
    /// Bins a binary time-tag stream into a histogram.
    Bin(BinArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Calibration(_) => "calibration",
            Command::Sample(_) => "sample",
            Command::Estimate(_) => "estimate",
            Command::MonteCarlo(MonteCarloCommand::Rabi(_)) => "monte-carlo rabi",
            Command::MonteCarlo(MonteCarloCommand::Mixture(_)) => "monte-carlo mixture",
            Command::SnrSweep(_) => "snr-sweep",
            Command::Fit(_) => "fit",
            Command::Bin(_) => "bin",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Preset name (NV1, NV2, NV3) or a JSON rate-model file.
    #[arg(long, default_value = "NV1")]
    pub params: String,
    /// Readout intensity in units of the saturation intensity.
    #[arg(long, default_value_t = READOUT_INTENSITY)]
    pub intensity: f64,
    #[arg(long, default_value_t = 240)]
    pub bins: usize,
    /// Bin width in ns.
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH_NS)]
    pub dt: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "ms0", value_parser = parse_spin)]
    pub spin: SpinPreparation,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrationArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Sample the calibration from this many measurements per state.
    #[arg(long)]
    pub n_cal: Option<u64>,
}

/// Calibration from a file, or computed from a rate model.
#[derive(Debug, Args, Serialize)]
pub struct CalSource {
    /// Calibration file (CSV or JSON).
    #[arg(long)]
    pub cal: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub source: CalSource,
    /// Probability that the spin was flipped.
    #[arg(long, default_value_t = 0.5)]
    pub p_flip: f64,
    #[arg(long, default_value_t = 100_000)]
    pub n_meas: u64,
    /// Background photons per bin per measurement.
    #[arg(long, default_value_t = 0.0)]
    pub background: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Exact,
    Approx,
    Counting,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Auto,
    Bins(usize),
}

fn parse_window(s: &str) -> std::result::Result<Window, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Window::Auto);
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("expected `auto` or a positive bin count, got `{s}`")),
        Ok(n) => Ok(Window::Bins(n)),
    }
}

fn parse_spin(s: &str) -> std::result::Result<SpinPreparation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateArgs {
    /// Histogram file (CSV or JSON).
    #[arg(long)]
    pub data: PathBuf,
    /// Calibration file (CSV or JSON).
    #[arg(long)]
    pub cal: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodChoice::All)]
    pub method: MethodChoice,
    /// Photon-counting window in bins, or `auto` for the SNR-optimal one.
    #[arg(long, default_value = "auto", value_parser = parse_window)]
    pub window: Window,
}

#[derive(Debug, Args, Serialize)]
pub struct EnsembleArgs {
    #[arg(long, default_value_t = 100_000)]
    pub n_meas: u64,
    /// Repetitions per sweep point.
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value = "auto", value_parser = parse_window)]
    pub window: Window,
    #[arg(long, default_value_t = 0.0)]
    pub background: f64,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonteCarloCommand {
    /// Ensembles along a Rabi oscillation.
    Rabi(RabiArgs),
    /// Ensembles at given flip probabilities.
    Mixture(MixtureArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct RabiArgs {
    #[command(flatten)]
    pub source: CalSource,
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    /// π-pulse duration in ns.
    #[arg(long, default_value_t = 100.0)]
    pub t_pi: f64,
    /// Comma-separated microwave durations in ns; overrides `--points`.
    #[arg(long, value_delimiter = ',')]
    pub durations: Option<Vec<f64>>,
    /// Evenly spaced durations from 0 to 2 t_pi.
    #[arg(long, default_value_t = 21)]
    pub points: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct MixtureArgs {
    #[command(flatten)]
    pub source: CalSource,
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    /// Comma-separated flip probabilities.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
    pub p_flip: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SnrSweepArgs {
    /// Preset name or JSON rate-model file.
    #[arg(long, default_value = "NV3")]
    pub params: String,
    /// Comma-separated intensities in units of the saturation intensity.
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_SWEEP)]
    pub intensities: Vec<f64>,
    #[arg(long, default_value_t = 240)]
    pub bins: usize,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH_NS)]
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingChoice {
    Poisson,
    Uniform,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// JSON manifest listing trace files, intensities and lifetime constraints.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Overrides the manifest's weighting.
    #[arg(long, value_enum)]
    pub weighting: Option<WeightingChoice>,
    /// Eliminate S0 and S1 through the measured lifetimes.
    #[arg(long)]
    pub hard_constraints: bool,
    /// Also fit only the N lowest intensities and report parameter drift.
    #[arg(long)]
    pub drift: Option<usize>,
    #[arg(long, default_value_t = nvreadout::fitting::DEFAULT_MAX_ITERATIONS)]
    pub max_iterations: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BinArgs {
    /// Binary time-tag file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH_NS)]
    pub dt: f64,
    #[arg(long, default_value_t = 240)]
    pub bins: usize,
    /// Delay from sync to the start of bin 0, in ns.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub sync_offset: f64,
}

fn invalid(msg: String) -> Error {
    Error::InvalidInput(msg)
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("--{name} must be positive, got {v}")))
    }
}

fn check_probability(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(format!("--{name} must lie in [0, 1], got {v}")))
    }
}

impl ModelArgs {
    fn validate(&self) -> Result<()> {
        if !(self.intensity > 0.0) || !self.intensity.is_finite() {
            return Err(invalid(format!(
                "--intensity must be positive (no excitation at {})",
                self.intensity
            )));
        }
        if self.bins == 0 {
            return Err(invalid("--bins must be at least 1".into()));
        }
        check_positive("dt", self.dt)
    }
}

impl EnsembleArgs {
    fn validate(&self) -> Result<()> {
        if self.n_meas == 0 {
            return Err(invalid("--n-meas must be at least 1".into()));
        }
        if self.reps < 2 {
            return Err(invalid("--reps must be at least 2".into()));
        }
        if !(self.background >= 0.0) || !self.background.is_finite() {
            return Err(invalid("--background must be non-negative".into()));
        }
        Ok(())
    }
}

impl Cli {
    /// Checks every flag before any computation starts.
    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(invalid("--threads must be at least 1".into()));
        }
        match &self.command {
            Command::Simulate(a) => a.model.validate(),
            Command::Calibration(a) => {
                if a.n_cal == Some(0) {
                    return Err(invalid("--n-cal must be at least 1".into()));
                }
                a.model.validate()
            }
            Command::Sample(a) => {
                a.source.model.validate()?;
                check_probability("p-flip", a.p_flip)?;
                if a.n_meas == 0 {
                    return Err(invalid("--n-meas must be at least 1".into()));
                }
                if !(a.background >= 0.0) || !a.background.is_finite() {
                    return Err(invalid("--background must be non-negative".into()));
                }
                Ok(())
            }
            Command::Estimate(_) => Ok(()),
            Command::MonteCarlo(MonteCarloCommand::Rabi(a)) => {
                a.source.model.validate()?;
                a.ensemble.validate()?;
                check_positive("t-pi", a.t_pi)?;
                match &a.durations {
                    Some(d) if d.is_empty() => Err(invalid("--durations is empty".into())),
                    Some(d) => match d.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
                        Some(t) => Err(invalid(format!("--durations holds invalid value {t}"))),
                        None => Ok(()),
                    },
                    None if a.points < 2 => Err(invalid("--points must be at least 2".into())),
                    None => Ok(()),
                }
            }
            Command::MonteCarlo(MonteCarloCommand::Mixture(a)) => {
                a.source.model.validate()?;
                a.ensemble.validate()?;
                a.p_flip.iter().try_for_each(|p| check_probability("p-flip", *p))
            }
            Command::SnrSweep(a) => {
                if a.bins == 0 {
                    return Err(invalid("--bins must be at least 1".into()));
                }
                check_positive("dt", a.dt)?;
                a.intensities.iter().try_for_each(|i| check_positive("intensities", *i))
            }
            Command::Fit(a) => {
                if a.drift == Some(0) {
                    return Err(invalid("--drift must be at least 1".into()));
                }
                if a.max_iterations == 0 {
                    return Err(invalid("--max-iterations must be at least 1".into()));
                }
                Ok(())
            }
            Command::Bin(a) => {
                check_positive("dt", a.dt)?;
                if a.bins == 0 {
                    return Err(invalid("--bins must be at least 1".into()));
                }
                if !a.sync_offset.is_finite() {
                    return Err(invalid("--sync-offset must be finite".into()));
                }
                Ok(())
            }
        }
    }
}
