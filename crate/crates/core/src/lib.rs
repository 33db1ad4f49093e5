//! Time-resolved fluorescence readout of nitrogen-vacancy spins.
//!
//! The crate is organized around the readout pipeline:
//!
//! * [`photophysics`] simulates the 5-level rate-equation model and produces
//!   per-bin fluorescence traces for the two calibration preparations.
//! * [`estimators`] turns a photon-count histogram plus a calibration into a
//!   spin-projection estimate (exact MLE, closed-form approximate MLE, or
//!   windowed photon counting) and predicts each estimator's noise.
//! * [`synth`] draws Poisson histograms and runs Monte Carlo ensembles.
//! * [`fitting`] fits the rate model to traces taken at several intensities.
//! * [`io`] bins time-tag streams and reads/writes the CSV/JSON/binary files.
//!
//! Rates are in MHz (events per microsecond) and times in nanoseconds.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod fitting;
pub mod io;
pub mod photophysics;
pub mod presets;
pub mod synth;

pub use error::{Error, Result};
pub use estimators::{CalibrationPair, EstimatorReport, HistogramData, Method};
pub use photophysics::{FluorescenceTrace, Populations, RateModel, SpinPreparation};
pub use synth::{MixtureSpec, MonteCarloResult};
