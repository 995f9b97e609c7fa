//! Multi-run drivers shared by the command line and the test suites.
//!
//! Each run of a sweep draws its own seed from the scenario seed and the
//! run index, and runs are collected in index order, so results do not
//! depend on how many worker threads execute them.

use rayon::prelude::*;
use serde::Serialize;

use crate::coincidence::{fit_gaussian, histogram, metrics, stream_duration_s, PairMetrics, PeakFit};
use crate::entanglement::{fit_visibility, franson_analyze, FransonOptions, FringeScan, VisibilityResult};
use crate::error::{domain, Error, Result};
use crate::rng::{child_seed, Domain};
use crate::stats::{poisson_power_law, weighted_line, PowerLaw};
use crate::synth::{synthesize, synthesize_franson, SynthScenario, CH_IDLER, CH_SIGNAL};
use crate::tags::TagStream;

/// Histogram span in units of the analysis window: room for the 5·FWHM
/// gap plus ten accidental windows on each side.
const SPAN_WINDOWS: f64 = 17.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerSweepRow {
    pub power_mw: f64,
    pub singles_signal_hz: f64,
    pub singles_idler_hz: f64,
    pub n_cc: u64,
    pub n_acc: f64,
    pub car: f64,
    pub car_sigma: f64,
    pub car_lower_bound: bool,
    pub r_detected_hz: f64,
    pub r_onchip_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerSweep {
    pub window_ps: f64,
    pub duration_s: f64,
    /// Peak position and width from the highest-power run, applied to all.
    pub reference_fit: PeakFit,
    pub rows: Vec<PowerSweepRow>,
    /// Background-subtracted coincidences against power.
    pub coincidence_law: PowerLaw,
    pub accidental_law: PowerLaw,
    /// Slope of ln CAR against ln detected rate.
    pub car_rate_slope: f64,
    pub car_rate_slope_sigma: f64,
}

impl PowerSweep {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "power_mw,singles_signal_hz,singles_idler_hz,n_cc,n_acc,car,car_sigma,r_detected_hz,r_onchip_hz")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.power_mw, r.singles_signal_hz, r.singles_idler_hz, r.n_cc, r.n_acc, r.car, r.car_sigma, r.r_detected_hz, r.r_onchip_hz
            )?;
        }
        Ok(())
    }
}

fn span_ps(window_ps: f64) -> i64 {
    (window_ps * SPAN_WINDOWS).ceil() as i64
}

/// Runs the scenario once per power in `powers_mw` (applied to every ring)
/// and fits the scaling laws.
pub fn power_sweep(base: &SynthScenario, powers_mw: &[f64], window_ps: Option<f64>, bin_ps: i64) -> Result<PowerSweep> {
    if powers_mw.len() < 3 {
        return domain("a power sweep needs at least three points");
    }
    if let Some(p) = powers_mw.iter().find(|p| !(**p > 0.0)) {
        return domain(format!("sweep powers must be > 0, got {p} mW"));
    }
    let bin = bin_ps.max(base.resolution_ps as i64);
    let streams: Vec<TagStream> = powers_mw
        .par_iter()
        .enumerate()
        .map(|(k, &p)| {
            let mut s = base.clone();
            s.pump_power_mw = vec![p; s.array.len()];
            s.seed = child_seed(base.seed, Domain::Sweep, k as u64);
            synthesize(&s)
        })
        .collect::<Result<_>>()?;

    let top = powers_mw
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap();
    let guess = window_ps.unwrap_or(base.jitter_fwhm_ps);
    let top_hist = histogram(&streams[top], CH_SIGNAL, CH_IDLER, bin, span_ps(guess))?;
    let reference_fit = fit_gaussian(&top_hist)?;
    let window = window_ps.unwrap_or(reference_fit.fwhm_ps);
    let ch = base.array.channels();

    let rows: Vec<PowerSweepRow> = streams
        .par_iter()
        .zip(powers_mw.par_iter())
        .map(|(stream, &p)| {
            let hist = histogram(stream, CH_SIGNAL, CH_IDLER, bin, span_ps(window.max(reference_fit.fwhm_ps)))?;
            let m: PairMetrics = metrics(&hist, &reference_fit, window, ch.efficiency_signal, ch.efficiency_idler)?;
            let t = stream_duration_s(stream);
            Ok(PowerSweepRow {
                power_mw: p,
                singles_signal_hz: stream.count(CH_SIGNAL) as f64 / t,
                singles_idler_hz: stream.count(CH_IDLER) as f64 / t,
                n_cc: m.n_cc,
                n_acc: m.n_acc,
                car: m.car,
                car_sigma: m.car_sigma,
                car_lower_bound: m.car_lower_bound,
                r_detected_hz: m.r_detected_hz,
                r_onchip_hz: m.r_onchip_hz,
            })
        })
        .collect::<Result<_>>()?;

    let windows = crate::coincidence::AccidentalPolicy::default().windows as f64;
    let x: Vec<f64> = rows.iter().map(|r| r.power_mw).collect();
    let net: Vec<f64> = rows.iter().map(|r| (r.n_cc as f64 - r.n_acc).max(0.0)).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.n_acc * windows).collect();
    let t = vec![base.duration_s; rows.len()];
    let t_acc: Vec<f64> = t.iter().map(|v| v * windows).collect();
    let coincidence_law = poisson_power_law(&x, &net, &t)?;
    let accidental_law = poisson_power_law(&x, &acc, &t_acc)?;

    let pts: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter(|r| !r.car_lower_bound && r.car > 0.0 && r.car_sigma > 0.0 && r.r_detected_hz > 0.0)
        .map(|r| (r.r_detected_hz.ln(), r.car.ln(), (r.car / r.car_sigma).powi(2)))
        .collect();
    let (_, car_rate_slope, car_rate_slope_sigma) = weighted_line(&pts)
        .map_err(|_| Error::Domain("fewer than two sweep points have accidentals; raise the power or duration".into()))?;

    Ok(PowerSweep {
        window_ps: window,
        duration_s: base.duration_s,
        reference_fit,
        rows,
        coincidence_law,
        accidental_law,
        car_rate_slope,
        car_rate_slope_sigma,
    })
}

/// One Franson stream per phase; the interferometer phase in
/// `base.franson` is replaced by each entry of `phases`.
pub fn franson_runs(base: &SynthScenario, phases: &[f64]) -> Result<Vec<(f64, TagStream)>> {
    let settings = base.franson.ok_or_else(|| Error::Config("franson: section required".into()))?;
    phases
        .par_iter()
        .enumerate()
        .map(|(k, &phi)| {
            let mut s = base.clone();
            s.franson = Some(crate::synth::FransonSettings { phase_rad: phi, ..settings });
            s.seed = child_seed(base.seed, Domain::Sweep, k as u64);
            Ok((phi, synthesize_franson(&s)?))
        })
        .collect()
}

/// `n` evenly spaced phases covering one full period.
pub fn phase_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| 2.0 * std::f64::consts::PI * k as f64 / n as f64).collect()
}

/// Synthesizes, analyses and fits a Franson fringe. The floor subtracted
/// for `v_corr` is the mean accidental count per window.
pub fn franson_pipeline(base: &SynthScenario, phases: &[f64], opts: &FransonOptions) -> Result<(FringeScan, VisibilityResult)> {
    let delay = base.franson.ok_or_else(|| Error::Config("franson: section required".into()))?.delay_ns;
    let runs = franson_runs(base, phases)?;
    let scan = franson_analyze(&runs, delay, opts)?;
    let v = fit_visibility(&scan, scan.mean_accidentals())?;
    Ok((scan, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArrayConfig, ChannelModel, ResonatorSpec};

    fn ring2(duration: f64, dark: f64) -> SynthScenario {
        let ch = ChannelModel { efficiency_signal: 0.05, efficiency_idler: 0.05, dark_rate_signal_hz: dark, dark_rate_idler_hz: dark, ..ChannelModel::ideal() };
        let array = ArrayConfig::new(vec![ResonatorSpec::from_device_table(2).unwrap()], ch).unwrap();
        SynthScenario::new(array, vec![0.0], duration, 21)
    }

    #[test]
    fn sweep_recovers_exponents() {
        let powers = crate::stats::log_grid(0.005, 0.1, 5);
        let s = power_sweep(&ring2(0.5, 0.0), &powers, None, 17).unwrap();
        assert_eq!(s.rows.len(), 5);
        assert!((s.coincidence_law.exponent - 2.0).abs() < 0.15, "{:?}", s.coincidence_law);
        assert!((s.accidental_law.exponent - 4.0).abs() < 0.4, "{:?}", s.accidental_law);
        assert!(s.rows.windows(2).all(|w| w[1].r_detected_hz > w[0].r_detected_hz));
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
    }

    #[test]
    fn sweep_rejects_bad_grid() {
        assert!(power_sweep(&ring2(0.1, 0.0), &[0.01, 0.02], None, 17).is_err());
        assert!(power_sweep(&ring2(0.1, 0.0), &[0.01, 0.0, 0.02], None, 17).is_err());
    }

    #[test]
    fn franson_needs_settings() {
        assert!(matches!(franson_runs(&ring2(0.1, 0.0), &[0.0]), Err(Error::Config(_))));
        let g = phase_grid(4);
        assert!((g[2] - std::f64::consts::PI).abs() < 1e-15);
    }
}
