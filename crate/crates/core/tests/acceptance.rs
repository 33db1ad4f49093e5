//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use nvreadout::estimators::{
    self, optimal_window, predicted_variance_approx, CalibrationPair,
    HistogramData, Method,
};
use nvreadout::fitting::{self, Constraints, Dataset, FitParameters, FitProblem, LifetimeConstraint};
use nvreadout::io::{self, BinningConfig, Channel, TimeTagRecord};
use nvreadout::presets::{self, nv1, READOUT_INTENSITY};
use nvreadout::synth::{self, EnsembleConfig, RabiConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BINS: usize = 240;
const DT: f64 = 8.33;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn readout_calibration() -> CalibrationPair {
    let model = nv1().at_intensity(READOUT_INTENSITY).unwrap();
    CalibrationPair::from_model(&model, BINS, DT).unwrap()
}

fn lifetimes() -> Outcome {
    let m = nv1();
    let checks = [
        ("t0", m.lifetime_ms0_ns(), 12.94),
        ("t1", m.lifetime_ms1_ns(), 6.29),
        ("ts", m.singlet_lifetime_ns(), 144.0),
    ];
    let pass = checks.iter().all(|(_, got, want)| (got / want - 1.0).abs() <= 0.005);
    let detail = checks
        .iter()
        .map(|(n, got, want)| format!("{n}={got:.3} ns (table {want})"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, detail)
}

fn noiseless_identities() -> Outcome {
    let cal = readout_calibration();
    let n = 100_000;
    let w = estimators::weights(&cal, n);
    let mut worst: f64 = 0.0;
    for s in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let expected: Vec<f64> = w.a.iter().zip(&w.b).map(|(a, b)| a + b * s).collect();
        let est = estimators::estimate_approx_mle_from_means(&expected, &cal, n).unwrap();
        worst = worst.max((est - s).abs());
    }
    outcome(worst < 1e-12, format!("max |error| = {worst:.2e}"))
}

fn variance_prediction() -> Outcome {
    let cal = readout_calibration();
    let config = EnsembleConfig {
        n_meas: 100_000,
        repetitions: 2000,
        seed: 3,
        methods: vec![Method::ApproxMle],
        ..Default::default()
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, p) in [0.0, 0.5, 1.0].into_iter().enumerate() {
        let r = synth::run_ensemble(&cal, p, &config, k as u32).unwrap();
        let s = &r.stats[0];
        let predicted = predicted_variance_approx(&cal, config.n_meas, 1.0 - 2.0 * p).unwrap().sqrt();
        let rel = s.std / predicted - 1.0;
        pass &= rel.abs() <= 0.05;
        parts.push(format!("p={p}: {:+.2}%", 100.0 * rel));
    }
    outcome(pass, format!("empirical/predicted std - 1: {}", parts.join(", ")))
}

/// Rabi ensemble shared by the gap and exact-vs-approx criteria.
fn rabi_ensemble() -> Vec<synth::MonteCarloResult> {
    let cal = readout_calibration();
    let config = RabiConfig::evenly_spaced(
        91.7,
        21,
        EnsembleConfig { n_meas: 100_000, repetitions: 1000, seed: 11, ..Default::default() },
    );
    synth::rabi_sweep(&cal, &config).unwrap()
}

fn mean_ratio(sweep: &[synth::MonteCarloResult], num: Method, den: Method) -> f64 {
    sweep
        .iter()
        .map(|r| r.get(num).unwrap().std / r.get(den).unwrap().std)
        .sum::<f64>()
        / sweep.len() as f64
}

fn estimator_gap(sweep: &[synth::MonteCarloResult]) -> Outcome {
    let cal = readout_calibration();
    let gap = mean_ratio(sweep, Method::PhotonCounting, Method::ApproxMle) - 1.0;
    let window = optimal_window(&cal, 1).unwrap();
    let snr_a = estimators::snr_approx(&cal, 1).unwrap();
    let dominance = (1..=cal.len()).all(|w| {
        estimators::snr_photon_counting(&cal, 1, w).map_or(true, |pc| snr_a >= pc)
    });
    let snr_pc = estimators::snr_photon_counting(&cal, 1, window).unwrap();
    outcome(
        (0.04..=0.10).contains(&gap) && dominance,
        format!(
            "std gap {:.2}% over {} points; SNR^2 ratio {:.3}; dominance over all windows: {dominance}",
            100.0 * gap,
            sweep.len(),
            (snr_a / snr_pc).powi(2)
        ),
    )
}

fn exact_vs_approx(sweep: &[synth::MonteCarloResult]) -> Outcome {
    let diff = mean_ratio(sweep, Method::ExactMle, Method::ApproxMle) - 1.0;
    let worst = sweep
        .iter()
        .map(|r| (r.get(Method::ExactMle).unwrap().std / r.get(Method::ApproxMle).unwrap().std - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(
        diff.abs() <= 0.005,
        format!("mean std ratio - 1 = {:+.3}% (worst point {:.3}%)", 100.0 * diff, 100.0 * worst),
    )
}

fn window_choice() -> Outcome {
    let cal = readout_calibration();
    let best = optimal_window(&cal, 1).unwrap();
    let brute = (1..=cal.len())
        .map(|w| (w, estimators::snr_photon_counting(&cal, 1, w).unwrap_or(f64::NEG_INFINITY)))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let ns = best as f64 * DT;
    outcome(
        (150.0..=350.0).contains(&ns) && best == brute.0,
        format!("{best} bins = {ns:.1} ns; brute-force argmax {} bins", brute.0),
    )
}

fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| lo * (hi / lo).powf(i as f64 / (points - 1) as f64))
        .collect()
}

fn snr_saturation() -> Outcome {
    let grid = log_grid(0.1, 10.0, 31);
    let mut pass = true;
    let mut parts = Vec::new();
    for name in presets::PRESET_NAMES {
        let model = presets::preset(name).unwrap();
        let points = synth::snr_intensity_sweep(&model, &grid, BINS, DT).unwrap();
        let high: Vec<_> = points.iter().filter(|p| p.intensity >= 3.0).collect();
        let worst = high
            .windows(2)
            .map(|w| w[1].snr_approx / w[0].snr_approx - 1.0)
            .fold(f64::INFINITY, f64::min);
        pass &= worst >= -0.005;
        parts.push(format!(
            "{name}: SNR_A {:.3}->{:.3}, min step {:+.3}%",
            points[0].snr_approx,
            points.last().unwrap().snr_approx,
            100.0 * worst
        ));
    }
    outcome(pass, parts.join("; "))
}

fn polarization_trend() -> Outcome {
    let grid = log_grid(0.1, 1.5, 15);
    let mut pass = true;
    let mut parts = Vec::new();
    for name in presets::PRESET_NAMES {
        let model = presets::preset(name).unwrap();
        let pol: Vec<f64> = grid
            .iter()
            .map(|&i| model.at_intensity(i).unwrap().initialized_polarization().unwrap())
            .collect();
        let monotone = pol.windows(2).all(|w| w[1] < w[0]);
        let (first, last) = (pol[0], *pol.last().unwrap());
        let in_band = |p: f64| (0.75..=0.95).contains(&p);
        pass &= monotone && in_band(first) && in_band(last);
        parts.push(format!("{name}: {:.1}% -> {:.1}%", 100.0 * first, 100.0 * last));
    }
    outcome(pass, format!("0.1 to 1.5 I_sat, decreasing: {}", parts.join(", ")))
}

fn fit_round_trip() -> Outcome {
    let truth_model = nv1();
    let rsat = truth_model.saturation_rate().unwrap();
    let intensities = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5];
    let n_avg = 3e7;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let datasets: Vec<Dataset> = intensities
        .iter()
        .map(|&i| {
            let (ms0, ms1) = truth_model
                .with_excitation(i * rsat)
                .calibration_traces(BINS, DT)
                .unwrap();
            Dataset {
                label: format!("{i} I_sat"),
                intensity: i,
                ms0: synth::noisy_trace(&ms0, n_avg as u64, &mut rng),
                ms1: synth::noisy_trace(&ms1, n_avg as u64, &mut rng),
                n_averages: n_avg,
            }
        })
        .collect();
    let constraints = Constraints {
        t0: LifetimeConstraint { value_ns: truth_model.lifetime_ms0_ns(), sigma_ns: 0.1 },
        t1: LifetimeConstraint { value_ns: truth_model.lifetime_ms1_ns(), sigma_ns: 0.1 },
    };
    let problem = FitProblem::new(datasets, constraints);
    let truth = FitParameters::from_model(&truth_model, intensities.iter().map(|i| i * rsat).collect());
    let mut guess = truth.clone();
    let signs: Vec<f64> = (0..6).map(|_| if rng.random_bool(0.5) { 1.3 } else { 0.7 }).collect();
    guess.radiative *= signs[0];
    guess.shelving0 *= signs[1];
    guess.shelving1 *= signs[2];
    guess.deshelving0 *= signs[3];
    guess.deshelving1 *= signs[4];
    guess.efficiency *= signs[5];
    for r in &mut guess.excitation {
        *r *= if rng.random_bool(0.5) { 1.3 } else { 0.7 };
    }

    let result = match fitting::fit(&problem, &guess) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("fit failed: {e}")),
    };
    let p = &result.params;
    let rates = [
        ("gamma", p.radiative, truth.radiative),
        ("S0", p.shelving0, truth.shelving0),
        ("S1", p.shelving1, truth.shelving1),
        ("D0", p.deshelving0, truth.deshelving0),
        ("D1", p.deshelving1, truth.deshelving1),
    ];
    let rates_ok = rates.iter().all(|(_, got, want)| (got / want - 1.0).abs() <= 0.05);
    let chi_ok = (0.8..=1.2).contains(&result.reduced_chi_square);
    let detail = format!(
        "{}; reduced chi-square {:.4}; {} iterations ({:?})",
        rates
            .iter()
            .map(|(n, got, want)| format!("{n} {:+.2}%", 100.0 * (got / want - 1.0)))
            .collect::<Vec<_>>()
            .join(", "),
        result.reduced_chi_square,
        result.iterations,
        result.termination
    );
    outcome(rates_ok && chi_ok && result.converged, detail)
}

fn binning_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n_records = 1_000_000;
    let mut t = 0u64;
    let records: Vec<TimeTagRecord> = (0..n_records)
        .map(|_| {
            t += rng.random_range(0..12);
            if rng.random_bool(5e-4) {
                TimeTagRecord::sync(t)
            } else {
                TimeTagRecord::photon(t)
            }
        })
        .collect();
    let config = BinningConfig::from_ns(DT, BINS, 3.0).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tags.bin");
    io::write_time_tags(&path, &records).unwrap();
    let streamed = io::bin_time_tags(io::open_time_tags(&path).unwrap(), &config).unwrap();

    // brute force: every photon against every sync that precedes it
    let syncs: Vec<(usize, u64)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.channel == Channel::Sync)
        .map(|(i, r)| (i, r.timestamp_ns))
        .collect();
    let mut counts = vec![0u64; BINS];
    let mut photons = 0u64;
    for (i, r) in records.iter().enumerate() {
        if r.channel != Channel::Photon {
            continue;
        }
        photons += 1;
        let mut owner = None;
        for &(j, ts) in &syncs {
            if j < i {
                owner = Some(ts);
            }
        }
        if let Some(ts) = owner {
            let delay_ps = (r.timestamp_ns - ts) as i64 * 1000 - config.sync_offset_ps;
            let width = config.bin_width_ps as i64;
            if delay_ps >= 0 && delay_ps < width * BINS as i64 {
                counts[(delay_ps / width) as usize] += 1;
            }
        }
    }
    let brute = HistogramData::new(config.dt_ns(), counts, syncs.len() as u64).unwrap();
    let equal = streamed.histogram == brute;
    let conserved = streamed.photons_total == photons
        && streamed.histogram.total() + streamed.discarded == streamed.photons_total;
    outcome(
        equal && conserved,
        format!(
            "{n_records} records, {} syncs, {} in window, {} discarded; equal: {equal}, conserved: {conserved}",
            streamed.syncs,
            streamed.histogram.total(),
            streamed.discarded
        ),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = run();
        if !o.pass {
            failures += 1;
        }
        println!(
            "{} criterion {id:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };
    report(1, "lifetime identities", &mut lifetimes);
    report(2, "noiseless estimator identities", &mut noiseless_identities);
    report(3, "variance prediction", &mut variance_prediction);
    let sweep = rabi_ensemble();
    report(4, "estimator gap", &mut || estimator_gap(&sweep));
    report(5, "exact vs approximate MLE", &mut || exact_vs_approx(&sweep));
    report(6, "optimal window", &mut window_choice);
    report(7, "SNR saturation", &mut snr_saturation);
    report(8, "polarization trend", &mut polarization_trend);
    report(9, "fit round trip", &mut fit_round_trip);
    report(10, "binning oracle", &mut binning_oracle);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
