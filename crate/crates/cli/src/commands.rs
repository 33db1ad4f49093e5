use std::path::Path;

use nvreadout::estimators::{self, CalibrationPair, EstimatorReport, Method};
use nvreadout::fitting::{
    self, ConstraintMode, DriftTable, FitOptions, FitResult, GoodnessReport, Weighting,
};
use nvreadout::io::{self, BinningConfig, FitManifest};
use nvreadout::photophysics::RateModel;
use nvreadout::synth::{self, EnsembleConfig, MixtureSpec, RabiConfig};
use nvreadout::{presets, Error, Result};
use serde::Serialize;

use crate::args::{
    BinArgs, CalSource, CalibrationArgs, Cli, Command, EnsembleArgs, EstimateArgs, FitArgs,
    MethodChoice, MixtureArgs, ModelArgs, MonteCarloCommand, RabiArgs, SampleArgs, SimulateArgs,
    SnrSweepArgs, WeightingChoice, Window,
};
use crate::output::Sink;

pub fn run(cli: &Cli) -> Result<()> {
    cli.validate()?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    }
    let sink = Sink::new(cli)?;
    match &cli.command {
        Command::Simulate(a) => simulate(a, &sink),
        Command::Calibration(a) => calibration(a, cli.seed, &sink),
        Command::Sample(a) => sample(a, cli.seed, &sink),
        Command::Estimate(a) => estimate(a, &sink),
        Command::MonteCarlo(MonteCarloCommand::Rabi(a)) => rabi(a, cli.seed, &sink),
        Command::MonteCarlo(MonteCarloCommand::Mixture(a)) => mixture(a, cli.seed, &sink),
        Command::SnrSweep(a) => snr_sweep(a, &sink),
        Command::Fit(a) => fit(a, &sink),
        Command::Bin(a) => bin(a, &sink),
    }
}

/// Preset by name, otherwise a JSON rate-model file.
fn load_model(params: &str) -> Result<RateModel> {
    if presets::PRESET_NAMES.iter().any(|p| p.eq_ignore_ascii_case(params)) {
        return presets::preset(params);
    }
    let path = Path::new(params);
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "`{params}` is neither a preset ({}) nor a file",
            presets::PRESET_NAMES.join(", ")
        )));
    }
    let model: RateModel = io::read_json(std::fs::File::open(path)?)?;
    model.validate()?;
    Ok(model)
}

fn driven_model(args: &ModelArgs) -> Result<RateModel> {
    load_model(&args.params)?.at_intensity(args.intensity)
}

fn load_calibration(source: &CalSource) -> Result<CalibrationPair> {
    match &source.cal {
        Some(path) => Ok(io::load_calibration(path)?.0),
        None => CalibrationPair::from_model(&driven_model(&source.model)?, source.model.bins, source.model.dt),
    }
}

fn simulate(a: &SimulateArgs, sink: &Sink) -> Result<()> {
    let model = driven_model(&a.model)?;
    let trace = model.fluorescence_trace(a.spin, a.model.bins, a.model.dt)?;
    sink.emit(&trace, |w, m| io::write_trace_csv(w, &trace, m))
}

fn calibration(a: &CalibrationArgs, seed: u64, sink: &Sink) -> Result<()> {
    let model = driven_model(&a.model)?;
    let mut cal = CalibrationPair::from_model(&model, a.model.bins, a.model.dt)?;
    if let Some(n) = a.n_cal {
        cal = synth::sample_calibration(&cal, n, seed)?;
    }
    sink.emit(&cal, |w, m| io::write_calibration_csv(w, &cal, m))
}

fn sample(a: &SampleArgs, seed: u64, sink: &Sink) -> Result<()> {
    let cal = load_calibration(&a.source)?;
    let spec = MixtureSpec { p_flip: a.p_flip, n_meas: a.n_meas, seed, background: a.background };
    let data = synth::sample_histogram(&cal, &spec)?;
    sink.emit(&data, |w, m| io::write_histogram_csv(w, &data, m))
}

fn estimate(a: &EstimateArgs, sink: &Sink) -> Result<()> {
    let (cal, _) = io::load_calibration(&a.cal)?;
    let (data, _) = io::load_histogram(&a.data)?;
    data.check_against(&cal)?;
    let methods = match a.method {
        MethodChoice::Exact => vec![Method::ExactMle],
        MethodChoice::Approx => vec![Method::ApproxMle],
        MethodChoice::Counting => vec![Method::PhotonCounting],
        MethodChoice::All => Method::ALL.to_vec(),
    };
    let window = match a.window {
        Window::Bins(w) => w,
        Window::Auto => estimators::optimal_window(&cal, data.n_meas)?,
    };
    let reports = methods
        .iter()
        .map(|m| match m {
            Method::ExactMle => estimators::estimate_exact_mle(&data, &cal),
            Method::ApproxMle => estimators::estimate_approx_mle(&data, &cal),
            Method::PhotonCounting => estimators::estimate_photon_counting(&data, &cal, window),
        })
        .collect::<Result<Vec<EstimatorReport>>>()?;
    let mut extra = Vec::new();
    if methods.contains(&Method::PhotonCounting) {
        extra.push(("window_bins", window.to_string()));
        extra.push(("window_ns", (window as f64 * cal.dt).to_string()));
    }
    let sink = sink.with_metadata(extra);
    sink.emit(&reports, |w, m| {
        io::write_table_csv(
            w,
            m,
            &["method", "s_z", "predicted_std", "flip_probability", "window_bins"],
            reports.iter().map(|r| {
                vec![
                    r.method.as_str().to_string(),
                    r.s_z.to_string(),
                    r.predicted_std.to_string(),
                    r.flip_probability.to_string(),
                    r.window_bins.map_or(String::new(), |w| w.to_string()),
                ]
            }),
        )
    })
}

fn ensemble_config(a: &EnsembleArgs, seed: u64) -> EnsembleConfig {
    EnsembleConfig {
        n_meas: a.n_meas,
        repetitions: a.reps,
        seed,
        background: a.background,
        window_bins: match a.window {
            Window::Auto => None,
            Window::Bins(w) => Some(w),
        },
        methods: Method::ALL.to_vec(),
    }
}

fn rabi(a: &RabiArgs, seed: u64, sink: &Sink) -> Result<()> {
    let cal = load_calibration(&a.source)?;
    let ensemble = ensemble_config(&a.ensemble, seed);
    let config = match &a.durations {
        Some(d) => RabiConfig { t_pi_ns: a.t_pi, durations_ns: d.clone(), ensemble },
        None => RabiConfig::evenly_spaced(a.t_pi, a.points, ensemble),
    };
    let results = synth::rabi_sweep(&cal, &config)?;
    sink.emit(&results, |w, m| io::write_monte_carlo_csv(w, &results, m))
}

fn mixture(a: &MixtureArgs, seed: u64, sink: &Sink) -> Result<()> {
    let cal = load_calibration(&a.source)?;
    let config = ensemble_config(&a.ensemble, seed);
    let results = a
        .p_flip
        .iter()
        .enumerate()
        .map(|(i, p)| synth::run_ensemble(&cal, *p, &config, i as u32))
        .collect::<Result<Vec<_>>>()?;
    sink.emit(&results, |w, m| io::write_monte_carlo_csv(w, &results, m))
}

fn snr_sweep(a: &SnrSweepArgs, sink: &Sink) -> Result<()> {
    let model = load_model(&a.params)?;
    let points = synth::snr_intensity_sweep(&model, &a.intensities, a.bins, a.dt)?;
    sink.emit(&points, |w, m| io::write_snr_csv(w, &points, m))
}

#[derive(Serialize)]
struct FitOutput {
    result: FitResult,
    goodness: GoodnessReport,
    drift: Option<DriftTable>,
}

fn fit(a: &FitArgs, sink: &Sink) -> Result<()> {
    let manifest = FitManifest::load(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let mut problem = manifest.to_problem(base)?;
    if let Some(w) = a.weighting {
        problem.weighting = match w {
            WeightingChoice::Poisson => Weighting::Poisson,
            WeightingChoice::Uniform => Weighting::Uniform,
        };
    }
    if a.hard_constraints {
        problem.constraint_mode = ConstraintMode::Hard;
    }
    let guess = match &manifest.initial_guess {
        Some(model) => fitting::guess_from_model(&problem, model)?,
        None => fitting::default_guess(&problem)?,
    };
    let options = FitOptions { max_iterations: a.max_iterations, ..Default::default() };
    let result = fitting::fit_with(&problem, &guess, &options)?;
    let goodness = fitting::goodness_report(&result, &problem)?;
    let drift = a.drift.map(|n| fitting::drift_table(&problem, &guess, n)).transpose()?;
    eprintln!("{result}");
    if !result.converged {
        eprintln!("warning: fit stopped without converging ({:?})", result.termination);
    }

    let weighting = match result.weighting {
        Weighting::Poisson => "poisson",
        Weighting::Uniform => "uniform",
    };
    let sink = sink.with_metadata([
        ("reduced_chi_square", result.reduced_chi_square.to_string()),
        ("converged", result.converged.to_string()),
        ("iterations", result.iterations.to_string()),
        ("weighting", weighting.to_string()),
    ]);
    let out = FitOutput { result, goodness, drift };
    sink.emit(&out, |w, m| {
        let p = &out.result.params;
        let e = &out.result.std_errors;
        let mut rows = vec![
            ("gamma", p.radiative, e.radiative),
            ("s0", p.shelving0, e.shelving0),
            ("s1", p.shelving1, e.shelving1),
            ("d0", p.deshelving0, e.deshelving0),
            ("d1", p.deshelving1, e.deshelving1),
            ("eta", p.efficiency, e.efficiency),
            ("t0_ns", out.result.t0_ns.0, out.result.t0_ns.1),
            ("t1_ns", out.result.t1_ns.0, out.result.t1_ns.1),
            ("ts_ns", out.result.ts_ns.0, out.result.ts_ns.1),
        ]
        .into_iter()
        .map(|(n, v, s)| vec![n.to_string(), v.to_string(), s.to_string()])
        .collect::<Vec<_>>();
        for (k, (r, s)) in p.excitation.iter().zip(&e.excitation).enumerate() {
            rows.push(vec![format!("r{k}"), r.to_string(), s.to_string()]);
        }
        for (k, (b, s)) in p.background.iter().zip(&e.background).enumerate() {
            rows.push(vec![format!("bg{k}"), b.to_string(), s.to_string()]);
        }
        io::write_table_csv(w, m, &["parameter", "value", "std_error"], rows.into_iter())
    })
}

fn bin(a: &BinArgs, sink: &Sink) -> Result<()> {
    let config = BinningConfig::from_ns(a.dt, a.bins, a.sync_offset)?;
    let outcome = io::bin_time_tags(io::open_time_tags(&a.input)?, &config)?;
    eprintln!(
        "{} syncs, {} photons, {} in window, {} discarded",
        outcome.syncs,
        outcome.photons_total,
        outcome.photons_in_window,
        outcome.discarded
    );
    let sink = sink.with_metadata([
        ("syncs", outcome.syncs.to_string()),
        ("photons_total", outcome.photons_total.to_string()),
        ("discarded", outcome.discarded.to_string()),
    ]);
    sink.emit(&outcome, |w, m| io::write_histogram_csv(w, &outcome.histogram, m))
}
