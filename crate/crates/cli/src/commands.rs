//! Command implementations. Each one reads its inputs, writes reports
//! into the output directory and records everything in `manifest.json`.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use log::info;
use serde::Serialize;

use qcomb_core::coincidence::{
    fit_gaussian, histogram, metrics, metrics_at, window_sweep, AccidentalPolicy, CoincidenceHistogram, SweepRow,
};
use qcomb_core::config::ScenarioFile;
use qcomb_core::entanglement::{fit_visibility, g2_heralded, FransonOptions, FransonReport, FringeScan, VisibilityResult};
use qcomb_core::fixtures;
use qcomb_core::freqbin::{
    expected_off_on_ratio, jsi_scan, mix_and_project, synthesize_freqbin, two_ring_state, FilterBank, FreqBinLayout,
};
use qcomb_core::pipeline::{franson_pipeline, phase_grid, power_sweep};
use qcomb_core::report::{to_json, write_with, FileEntry, RunManifest};
use qcomb_core::rng::{child_seed, Domain};
use qcomb_core::synth::{synthesize, synthesize_franson, synthesize_hbt, SynthScenario};
use qcomb_core::tags::MAGIC;
use qcomb_core::tomography::{
    background_correct, bell_phi_plus, mle_reconstruct, read_settings_csv, MleOptions, Reconstruction, TomographyReport,
};
use qcomb_core::{Error, TagStream};

use crate::{Cli, Command, Format, Global, Layout, EXIT_DATA, EXIT_NOT_CONVERGED, EXIT_USAGE};

const DEFAULT_BIN_PS: i64 = 17;

/// Missing or conflicting arguments detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(core) = cause.downcast_ref::<Error>() {
            return if core.is_convergence_failure() { EXIT_NOT_CONVERGED } else { EXIT_DATA };
        }
    }
    EXIT_DATA
}

struct Run {
    g: Global,
    config: Option<ScenarioFile>,
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    fn scenario_file(&self) -> Result<&ScenarioFile> {
        match &self.config {
            Some(c) => Ok(c),
            None => usage("this command needs --config"),
        }
    }

    fn scenario(&self) -> Result<SynthScenario> {
        Ok(self.scenario_file()?.scenario(self.manifest.seed)?)
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{}: no such file", path.display()))).into());
        }
        self.manifest.inputs.push(FileEntry::of(path)?);
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.g.out.join(name)
    }

    fn emit(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let p = self.path(name);
        write_with(&p, f).with_context(|| format!("writing {}", p.display()))?;
        self.manifest.outputs.push(FileEntry::of(&p)?);
        info!("wrote {}", p.display());
        Ok(())
    }

    fn emit_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = to_json(value)?;
        self.emit(name, |w| w.write_all(text.as_bytes()))
    }

    fn window(&self) -> Option<f64> {
        self.g.window_ps.or_else(|| self.config.as_ref().and_then(|c| c.experiment.window_ps))
    }

    fn bin(&self, default: i64) -> i64 {
        self.g.bin_ps.or_else(|| self.config.as_ref().and_then(|c| c.experiment.bin_ps)).unwrap_or(default)
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.wall_time_s = self.start.elapsed().as_secs_f64();
        let text = to_json(&self.manifest)?;
        std::fs::write(self.path("manifest.json"), text)?;
        Ok(())
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate { .. } => "simulate",
        Command::Coincidence { .. } => "coincidence",
        Command::Franson { .. } => "franson",
        Command::G2h { .. } => "g2h",
        Command::Jsi => "jsi",
        Command::Freqbin { .. } => "freqbin",
        Command::Tomo { .. } => "tomo",
        Command::Sweep { .. } => "sweep",
        Command::Fixtures => "fixtures",
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global.clone();
    if let Some(n) = g.threads {
        if n == 0 {
            return usage("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow!(e))?;
    }
    if let Some(w) = g.window_ps {
        if !(w > 0.0) {
            return usage("--window-ps must be > 0");
        }
    }
    if let Some(b) = g.bin_ps {
        if b < 1 {
            return usage("--bin-ps must be >= 1");
        }
    }
    let config = match &g.config {
        Some(p) => Some(ScenarioFile::load(p)?),
        None => None,
    };
    let (seed, source) = match (g.seed, config.as_ref().and_then(|c| c.experiment.seed)) {
        (Some(s), _) => (s, "flag"),
        (None, Some(s)) => (s, "config"),
        (None, None) => (rand::random::<u64>(), "drawn"),
    };
    let name = command_name(&cli.command);
    let mut manifest = RunManifest::new(name, std::env::args().skip(1).collect(), seed, source);
    manifest.config_digest = config.as_ref().map(|c| c.digest());
    std::fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    let mut run = Run { g, config, manifest, start: Instant::now() };
    if let Some(p) = run.g.config.clone() {
        run.input(&p)?;
    }
    info!("{name}: seed {seed} ({source})");

    match cli.command {
        Command::Simulate { layout } => simulate(&mut run, layout)?,
        Command::Coincidence { input, signal, idler, span_ps } => coincidence(&mut run, &input, signal, idler, span_ps)?,
        Command::Franson { phases } => franson(&mut run, phases)?,
        Command::G2h { input, tau_max_ps, tau_step_ps } => g2h(&mut run, input.as_deref(), tau_max_ps, tau_step_ps)?,
        Command::Jsi => jsi(&mut run)?,
        Command::Freqbin { input, phases, theta, accidentals } => freqbin(&mut run, input.as_deref(), phases, theta, accidentals)?,
        Command::Tomo { input, accidentals, restarts } => {
            let outcome = tomo(&mut run, &input, accidentals, restarts);
            // the best reconstruction is reported even when it did not converge
            run.finish()?;
            return outcome;
        }
        Command::Sweep { powers } => sweep(&mut run, powers)?,
        Command::Fixtures => {
            fixtures::write_all(&run.g.out)?;
            for name in [fixtures::RING2_FILE, fixtures::FREQBIN_FILE, fixtures::FRINGE_FILE, fixtures::TOMO_FILE] {
                let entry = FileEntry::of(&run.path(name))?;
                run.manifest.outputs.push(entry);
            }
        }
    }
    run.finish()
}

fn simulate(run: &mut Run, layout: Layout) -> Result<()> {
    let s = run.scenario()?;
    let stream = match layout {
        Layout::Plain => synthesize(&s)?,
        Layout::Franson => {
            if s.franson.is_none() {
                return usage("--layout franson needs a [franson] section");
            }
            synthesize_franson(&s)?
        }
        Layout::Hbt => synthesize_hbt(&s)?,
    };
    info!("{} records over {} channels", stream.len(), stream.channel_count());
    run.emit("stream.qtag", |w| stream.write_to(w))
}

fn load_histogram(run: &mut Run, input: &Path, signal: u16, idler: u16, span_ps: i64) -> Result<CoincidenceHistogram> {
    run.input(input)?;
    let bytes = std::fs::read(input)?;
    if bytes.starts_with(MAGIC) {
        let stream = TagStream::from_bytes(&bytes)?;
        let bin = run.bin(DEFAULT_BIN_PS.max(stream.resolution_ps() as i64));
        Ok(histogram(&stream, signal, idler, bin, span_ps)?)
    } else {
        Ok(CoincidenceHistogram::read_csv(&bytes[..])?)
    }
}

fn efficiencies(run: &Run) -> Result<(f64, f64)> {
    match &run.config {
        Some(c) => {
            let ch = c.channels()?;
            Ok((ch.efficiency_signal, ch.efficiency_idler))
        }
        None => Ok((1.0, 1.0)),
    }
}

#[derive(Serialize)]
struct CoincidenceReport {
    n_cc: u64,
    n_acc: f64,
    car: f64,
    car_sigma: f64,
    car_lower_bound: bool,
    window_ps: f64,
    r_detected_hz: f64,
    r_onchip_hz: f64,
    peak_center_ps: f64,
    peak_fwhm_ps: f64,
    peak_fwhm_sigma_ps: f64,
    window_sweep: Vec<SweepRow>,
}

fn coincidence(run: &mut Run, input: &Path, signal: u16, idler: u16, span_ps: i64) -> Result<()> {
    let hist = load_histogram(run, input, signal, idler, span_ps)?;
    let fit = fit_gaussian(&hist)?;
    let window = run.window().unwrap_or(fit.fwhm_ps);
    let (es, ei) = efficiencies(run)?;
    let m = metrics(&hist, &fit, window, es, ei)?;
    let grid: Vec<f64> = [0.25, 0.5, 1.0, 1.5, 2.0, 3.0].iter().map(|k| k * fit.fwhm_ps).collect();
    let sweep = window_sweep(&hist, &fit, &grid, es, ei)?;
    run.emit("histogram.csv", |w| hist.write_csv(w))?;
    let report = CoincidenceReport {
        n_cc: m.n_cc,
        n_acc: m.n_acc,
        car: m.car,
        car_sigma: m.car_sigma,
        car_lower_bound: m.car_lower_bound,
        window_ps: m.window_ps,
        r_detected_hz: m.r_detected_hz,
        r_onchip_hz: m.r_onchip_hz,
        peak_center_ps: fit.mean_ps,
        peak_fwhm_ps: fit.fwhm_ps,
        peak_fwhm_sigma_ps: fit.sigma_error_ps() * qcomb_core::FWHM_PER_SIGMA,
        window_sweep: sweep,
    };
    match run.g.format {
        Format::Json => run.emit_json("coincidence.json", &report),
        Format::Csv => {
            run.emit("coincidence.csv", |w| {
                writeln!(w, "n_cc,n_acc,car,car_sigma,window_ps,r_detected_hz,r_onchip_hz")?;
                writeln!(w, "{},{},{},{},{},{},{}", m.n_cc, m.n_acc, m.car, m.car_sigma, m.window_ps, m.r_detected_hz, m.r_onchip_hz)
            })?;
            run.emit("window_sweep.csv", |w| {
                writeln!(w, "window_ps,n_cc,n_acc,car,rate_hz")?;
                for r in &report.window_sweep {
                    writeln!(w, "{},{},{},{},{}", r.window_ps, r.n_cc, r.n_acc, r.car, r.rate_hz)?;
                }
                Ok(())
            })
        }
    }
}

fn franson(run: &mut Run, phases: usize) -> Result<()> {
    if phases < 5 {
        return usage("--phases must be >= 5");
    }
    let s = run.scenario()?;
    if s.franson.is_none() {
        return usage("franson needs a [franson] section in the config");
    }
    let mut opts = FransonOptions::new(run.window().unwrap_or(s.jitter_fwhm_ps));
    opts.bin_width_ps = run.bin(10).max(s.resolution_ps as i64);
    let (scan, v) = franson_pipeline(&s, &phase_grid(phases), &opts)?;
    let report = FransonReport::new(&scan, &v);
    match run.g.format {
        Format::Json => run.emit_json("franson.json", &report),
        Format::Csv => run.emit("franson.csv", |w| {
            writeln!(w, "phase_rad,central,side_left,side_right,accidentals")?;
            for p in &scan.points {
                writeln!(w, "{},{},{},{},{}", p.phase_rad, p.central, p.side_left, p.side_right, p.accidentals)?;
            }
            Ok(())
        }),
    }
}

fn g2h(run: &mut Run, input: Option<&Path>, tau_max_ps: f64, tau_step_ps: f64) -> Result<()> {
    if !(tau_step_ps > 0.0) || !(tau_max_ps >= 0.0) {
        return usage("--tau-step-ps must be > 0 and --tau-max-ps >= 0");
    }
    let (stream, default_window) = match input {
        Some(p) => {
            run.input(p)?;
            (TagStream::load(p)?, 867.0)
        }
        None => {
            let s = run.scenario()?;
            (synthesize_hbt(&s)?, s.jitter_fwhm_ps)
        }
    };
    let window = run.window().unwrap_or(default_window);
    let n = (tau_max_ps / tau_step_ps).floor() as i64;
    let grid: Vec<f64> = (-n..=n).map(|k| k as f64 * tau_step_ps).collect();
    let curve = g2_heralded(&stream, (0, 1, 2), window, &grid)?;
    match run.g.format {
        Format::Json => run.emit_json("g2.json", &curve),
        Format::Csv => run.emit("g2.csv", |w| curve.write_csv(w)),
    }
}

#[derive(Serialize)]
struct JsiReport<'a> {
    matrix: &'a qcomb_core::freqbin::JsiMatrix,
    off_on_ratio: f64,
    off_on_ratio_sigma: f64,
    expected_off_on_ratio: f64,
}

fn jsi(run: &mut Run) -> Result<()> {
    let s = run.scenario()?;
    let Some(filters) = run.scenario_file()?.filter_bank()? else {
        return usage("jsi needs a [filters] section in the config");
    };
    let window = run.window().unwrap_or(s.jitter_fwhm_ps);
    let m = jsi_scan(&s, &filters, window)?;
    let windows = AccidentalPolicy::default().windows;
    let (r, sigma) = m.off_on_ratio(windows);
    match run.g.format {
        Format::Json => run.emit_json(
            "jsi.json",
            &JsiReport { matrix: &m, off_on_ratio: r, off_on_ratio_sigma: sigma, expected_off_on_ratio: expected_off_on_ratio(m.n, filters.leakage()) },
        ),
        Format::Csv => run.emit("jsi.csv", |w| m.write_csv(w)),
    }
}

#[derive(Serialize)]
struct FreqbinRow {
    phi_m_rad: f64,
    prob: f64,
    counts: u64,
    accidentals: f64,
}

#[derive(Serialize)]
struct FreqbinReport {
    fit: VisibilityResult,
    rows: Vec<FreqbinRow>,
}

/// Fits `C₀(1 + V cos(4φ_m + θ))` by treating `4φ_m` as the fringe phase.
fn fit_four_phi(rows: &[(f64, u64)], floor: f64) -> Result<VisibilityResult> {
    let folded: Vec<(f64, u64)> = rows.iter().map(|(p, c)| (4.0 * p, *c)).collect();
    Ok(fit_visibility(&FringeScan::from_counts(&folded)?, floor)?)
}

fn freqbin(run: &mut Run, input: Option<&Path>, phases: usize, theta: f64, accidentals: f64) -> Result<()> {
    if let Some(p) = input {
        run.input(p)?;
        let scan = fixtures::read_fringe_csv(std::io::BufReader::new(std::fs::File::open(p)?))?;
        let fit = fit_four_phi(&scan, accidentals)?;
        return match run.g.format {
            Format::Json => run.emit_json("freqbin.json", &fit),
            Format::Csv => run.emit("freqbin.csv", |w| {
                writeln!(w, "v_raw,v_raw_sigma,v_corr,v_corr_sigma,phase_offset_rad")?;
                writeln!(w, "{},{},{},{},{}", fit.v_raw, fit.v_raw_sigma, fit.v_corr, fit.v_corr_sigma, fit.phase_offset_rad)
            }),
        };
    }
    if phases < 5 {
        return usage("--phases must be >= 5");
    }
    let base = run.scenario()?;
    let Some(settings) = base.mixing else {
        return usage("freqbin needs a [mixing] section in the config");
    };
    let rings = base.array.resonators();
    if rings.len() != 2 {
        return usage(format!("freqbin needs exactly two rings, the config has {}", rings.len()));
    }
    let layout = FreqBinLayout::from_rings(&rings[0], &rings[1]);
    let filters = match run.scenario_file()?.filter_bank()? {
        Some(f) => f,
        None => FilterBank::central(&layout, 0.4 * settings.mod_freq_ghz, 30.0)?,
    };
    let state = two_ring_state(&rings[0], &rings[1], base.pump_power_mw[0], base.pump_power_mw[1], theta)?;
    let window = run.window().unwrap_or(base.jitter_fwhm_ps);
    let bin = run.bin(10).max(base.resolution_ps as i64);
    let span = (17.0 * window.max(base.jitter_fwhm_ps)).ceil() as i64;
    // one full fringe period of 4φ_m
    let grid: Vec<f64> = (0..phases).map(|k| 0.5 * PI * k as f64 / phases as f64).collect();
    let mut rows = Vec::with_capacity(phases);
    for (k, &phi) in grid.iter().enumerate() {
        let s_phi = settings.with_phase(phi);
        let prob = mix_and_project(&state, &s_phi, &filters, &layout)?.p_coincidence;
        let mut s = base.clone();
        s.mixing = Some(s_phi);
        s.seed = child_seed(base.seed, Domain::Sweep, k as u64);
        let stream = synthesize_freqbin(&s, theta, &filters)?;
        let h = histogram(&stream, 0, 1, bin, span)?;
        let m = metrics_at(&h, 0.0, base.jitter_fwhm_ps, window, 1.0, 1.0, &AccidentalPolicy::default())?;
        rows.push(FreqbinRow { phi_m_rad: phi, prob, counts: m.n_cc, accidentals: m.n_acc });
    }
    let floor = rows.iter().map(|r| r.accidentals).sum::<f64>() / rows.len() as f64;
    let fit = fit_four_phi(&rows.iter().map(|r| (r.phi_m_rad, r.counts)).collect::<Vec<_>>(), floor)?;
    match run.g.format {
        Format::Json => run.emit_json("freqbin.json", &FreqbinReport { fit, rows }),
        Format::Csv => run.emit("freqbin.csv", |w| {
            writeln!(w, "phi_m_rad,prob,counts,accidentals")?;
            for r in &rows {
                writeln!(w, "{},{},{},{}", r.phi_m_rad, r.prob, r.counts, r.accidentals)?;
            }
            Ok(())
        }),
    }
}

fn reconstruct(settings: &[qcomb_core::tomography::ProjectionSetting], opts: &MleOptions) -> Result<(Reconstruction, Option<Error>)> {
    match mle_reconstruct(settings, opts) {
        Ok(r) => Ok((r, None)),
        Err(Error::NotConverged { restarts, best_likelihood, best }) => {
            let rec = (*best).clone();
            Ok((rec, Some(Error::NotConverged { restarts, best_likelihood, best })))
        }
        Err(e) => Err(e.into()),
    }
}

fn tomo(run: &mut Run, input: &Path, accidentals: Option<f64>, restarts: usize) -> Result<()> {
    if restarts == 0 {
        return usage("--restarts must be >= 1");
    }
    run.input(input)?;
    let settings = read_settings_csv(std::io::BufReader::new(std::fs::File::open(input)?))?;
    let opts = MleOptions { restarts, seed: run.manifest.seed, ..MleOptions::default() };
    let (raw, mut failure) = reconstruct(&settings, &opts)?;
    let corrected = match accidentals {
        Some(a) => {
            let (fixed, flags) = background_correct(&settings, &vec![a; settings.len()])?;
            let (rec, f) = reconstruct(&fixed, &opts)?;
            failure = failure.or(f);
            Some((rec, flags.iter().filter(|f| **f).count()))
        }
        None => None,
    };
    let report = TomographyReport::new(&raw, &bell_phi_plus(), corrected.as_ref().map(|(r, n)| (r, *n)))?;
    let rho = corrected.as_ref().map_or(&raw.rho, |(r, _)| &r.rho).clone();
    match run.g.format {
        Format::Json => run.emit_json("tomography.json", &report)?,
        Format::Csv => run.emit("rho.csv", |w| {
            writeln!(w, "row,col,re,im")?;
            let m = rho.matrix();
            for i in 0..4 {
                for j in 0..4 {
                    writeln!(w, "{i},{j},{},{}", m[(i, j)].re, m[(i, j)].im)?;
                }
            }
            Ok(())
        })?,
    }
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn sweep(run: &mut Run, powers: Option<Vec<f64>>) -> Result<()> {
    let base = run.scenario()?;
    let powers = match powers.or_else(|| run.config.as_ref().and_then(|c| c.pump.sweep_mw.clone())) {
        Some(p) => p,
        None => return usage("sweep needs --powers or pump.sweep_mw"),
    };
    let result = power_sweep(&base, &powers, run.window(), run.bin(DEFAULT_BIN_PS))?;
    match run.g.format {
        Format::Json => run.emit_json("sweep.json", &result),
        Format::Csv => run.emit("sweep.csv", |w| result.write_csv(w)),
    }
}
