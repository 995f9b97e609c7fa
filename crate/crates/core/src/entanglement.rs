//! Time-bin entanglement (Franson fringes, CHSH check) and heralded g².

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::coincidence::{self, accidental_windows, fit_gaussian, histogram, histogram_times, CoincidenceHistogram};
use crate::error::{domain, Error, Result};
use crate::tags::TagStream;

/// Local-realism bound on the two-photon fringe visibility, `1/√2`.
pub const CHSH_VISIBILITY: f64 = 0.70711;
/// Significance needed before a CHSH violation is reported.
pub const CHSH_FLAG_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FransonOptions {
    pub ch_signal: u16,
    pub ch_idler: u16,
    pub bin_width_ps: i64,
    pub window_ps: f64,
    pub accidental_windows: usize,
}

impl FransonOptions {
    pub fn new(window_ps: f64) -> Self {
        Self { ch_signal: 0, ch_idler: 1, bin_width_ps: 10, window_ps, accidental_windows: 20 }
    }
}

/// Per-phase bookkeeping of a Franson scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FringePoint {
    pub phase_rad: f64,
    pub central: u64,
    pub side_left: u64,
    pub side_right: u64,
    /// Mean accidental counts per window.
    pub accidentals: f64,
    pub singles_signal_hz: f64,
    pub singles_idler_hz: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FringeScan {
    pub points: Vec<FringePoint>,
    /// χ² p-value of the side-peak counts against a constant rate.
    pub side_peak_p_value: f64,
    pub singles_signal_p_value: f64,
    pub singles_idler_p_value: f64,
    pub fwhm_ps: f64,
}

impl FringeScan {
    /// A scan from bare `(phase, counts)` pairs, e.g. a recorded table.
    pub fn from_counts(data: &[(f64, u64)]) -> Result<Self> {
        let points = data
            .iter()
            .map(|&(phase_rad, central)| FringePoint {
                phase_rad,
                central,
                side_left: 0,
                side_right: 0,
                accidentals: 0.0,
                singles_signal_hz: 0.0,
                singles_idler_hz: 0.0,
                duration_s: 1.0,
            })
            .collect();
        let scan = Self {
            points,
            side_peak_p_value: f64::NAN,
            singles_signal_p_value: f64::NAN,
            singles_idler_p_value: f64::NAN,
            fwhm_ps: f64::NAN,
        };
        scan.validate()?;
        Ok(scan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.windows(2).any(|w| !(w[1].phase_rad > w[0].phase_rad)) {
            return domain("scan phases must be strictly increasing");
        }
        Ok(())
    }

    pub fn phases(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.phase_rad).collect()
    }

    pub fn central_counts(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.central).collect()
    }

    /// Accidental floor averaged over the scan.
    pub fn mean_accidentals(&self) -> f64 {
        self.points.iter().map(|p| p.accidentals).sum::<f64>() / self.points.len().max(1) as f64
    }
}

/// χ² test of `counts_k` against a rate that is constant in time.
pub fn constant_rate_p_value(counts: &[f64], durations: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    let t: f64 = durations.iter().sum();
    if counts.len() < 2 || total <= 0.0 {
        return 1.0;
    }
    let chi2: f64 = counts
        .iter()
        .zip(durations)
        .map(|(c, d)| {
            let e = total * d / t;
            (c - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("dof >= 1");
    1.0 - dist.cdf(chi2)
}

fn analyze_one(
    phase: f64,
    stream: &TagStream,
    delay_ps: f64,
    opts: &FransonOptions,
) -> Result<(FringePoint, f64)> {
    let w = opts.window_ps;
    let span = (delay_ps + 20.0 * w).ceil() as i64;
    let hist = histogram(stream, opts.ch_signal, opts.ch_idler, opts.bin_width_ps, span)?;
    let side = |sign: f64| -> Result<coincidence::PeakFit> {
        let (lo, hi) = if sign > 0.0 { (0.5 * delay_ps, 1.5 * delay_ps) } else { (-1.5 * delay_ps, -0.5 * delay_ps) };
        let part = hist.slice(lo.floor() as i64, hi.ceil() as i64);
        let fit = fit_gaussian(&part).map_err(|e| {
            Error::Structure(format!("no side peak near {:+.3} ns ({e}); check the configured delay", sign * delay_ps * 1e-3))
        })?;
        if (fit.mean_ps - sign * delay_ps).abs() > 0.25 * delay_ps {
            return Err(Error::Structure(format!(
                "side peak found at {:.3} ns, expected {:+.3} ns",
                fit.mean_ps * 1e-3,
                sign * delay_ps * 1e-3
            )));
        }
        Ok(fit)
    };
    let left = side(-1.0)?;
    let right = side(1.0)?;
    let fwhm = 0.5 * (left.fwhm_ps + right.fwhm_ps);
    if delay_ps <= 5.0 * fwhm {
        return domain(format!("delay {:.1} ps does not resolve peaks of FWHM {fwhm:.1} ps", delay_ps));
    }
    let center = 0.5 * (left.mean_ps + right.mean_ps);
    let win = |c: f64| hist.sum(hist.window_bins(c, w));
    let m = hist.window_bins(center, w).len();
    let acc = accidental_windows(&hist, left.mean_ps - 5.0 * fwhm, right.mean_ps + 5.0 * fwhm, m, opts.accidental_windows);
    if acc.len() < opts.accidental_windows / 2 {
        return domain(format!("only {} accidental windows beyond the side peaks", acc.len()));
    }
    let duration = coincidence::stream_duration_s(stream);
    let point = FringePoint {
        phase_rad: phase,
        central: win(center),
        side_left: win(left.mean_ps),
        side_right: win(right.mean_ps),
        accidentals: acc.iter().sum::<u64>() as f64 / acc.len() as f64,
        singles_signal_hz: stream.count(opts.ch_signal) as f64 / duration,
        singles_idler_hz: stream.count(opts.ch_idler) as f64 / duration,
        duration_s: duration,
    };
    Ok((point, fwhm))
}

/// Three-peak bookkeeping for each `(phase, stream)` run.
pub fn franson_analyze(runs: &[(f64, TagStream)], delay_ns: f64, opts: &FransonOptions) -> Result<FringeScan> {
    if runs.is_empty() {
        return domain("no phase settings given");
    }
    if !(delay_ns > 0.0) || !(opts.window_ps > 0.0) {
        return domain("delay and window must be > 0");
    }
    let delay_ps = delay_ns * 1e3;
    let results = runs
        .par_iter()
        .map(|(phase, stream)| analyze_one(*phase, stream, delay_ps, opts))
        .collect::<Result<Vec<_>>>()?;
    let fwhm_ps = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    let points: Vec<FringePoint> = results.into_iter().map(|r| r.0).collect();
    let durations: Vec<f64> = points.iter().map(|p| p.duration_s).collect();
    let sides: Vec<f64> = points.iter().map(|p| (p.side_left + p.side_right) as f64).collect();
    let singles = |f: fn(&FringePoint) -> f64| -> Vec<f64> { points.iter().map(|p| f(p) * p.duration_s).collect() };
    let scan = FringeScan {
        side_peak_p_value: constant_rate_p_value(&sides, &durations),
        singles_signal_p_value: constant_rate_p_value(&singles(|p| p.singles_signal_hz), &durations),
        singles_idler_p_value: constant_rate_p_value(&singles(|p| p.singles_idler_hz), &durations),
        points,
        fwhm_ps,
    };
    scan.validate()?;
    Ok(scan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VisibilityResult {
    pub v_raw: f64,
    pub v_raw_sigma: f64,
    pub v_corr: f64,
    pub v_corr_sigma: f64,
    pub phase_offset_rad: f64,
    /// Mean count `C₀` of the raw fit.
    pub c0: f64,
    pub accidental_floor: f64,
    /// `(v_raw − 1/√2)/δv_raw`.
    pub chsh_violation_sigmas: f64,
    pub chsh_violated: bool,
}

/// Weighted linear fit of `C(φ) = a + b cos φ + c sin φ`, i.e.
/// `C₀[1 + V cos(φ + φ₀)]`, then background subtraction of `floor`.
pub fn fit_visibility(scan: &FringeScan, accidental_floor: f64) -> Result<VisibilityResult> {
    scan.validate()?;
    let pts = &scan.points;
    if pts.len() < 5 {
        return domain(format!("need at least 5 phase points, got {}", pts.len()));
    }
    let span = pts.last().unwrap().phase_rad - pts[0].phase_rad;
    if span < std::f64::consts::PI - 1e-12 {
        return domain(format!("phases span {span:.3} rad, need at least half a period"));
    }
    if !(accidental_floor >= 0.0) {
        return domain("accidental floor must be >= 0");
    }
    let mut xtx = Matrix3::zeros();
    let mut xty = Vector3::zeros();
    for p in pts {
        let y = p.central as f64;
        let wt = 1.0 / y.max(1.0);
        let x = Vector3::new(1.0, p.phase_rad.cos(), p.phase_rad.sin());
        xtx += x * x.transpose() * wt;
        xty += x * (y * wt);
    }
    // scale-free conditioning check before inverting
    let d = Vector3::from_fn(|i, _| xtx[(i, i)].sqrt());
    let scaled = Matrix3::from_fn(|i, j| xtx[(i, j)] / (d[i] * d[j]));
    let eig = scaled.symmetric_eigenvalues();
    if !(eig.min() > 1e-10 * eig.max()) {
        return Err(Error::Singular("phase sampling does not constrain the fringe".into()));
    }
    let cov = xtx.try_inverse().ok_or_else(|| Error::Singular("fit covariance is singular".into()))?;
    let beta = cov * xty;
    let (a, b, c) = (beta[0], beta[1], beta[2]);
    let r = (b * b + c * c).sqrt();
    let vis = |a_eff: f64| -> Result<(f64, f64)> {
        if !(a_eff > 0.0) {
            return domain("fringe mean does not exceed the accidental floor");
        }
        let v = r / a_eff;
        let grad = if r > 0.0 {
            Vector3::new(-v / a_eff, b / (a_eff * r), c / (a_eff * r))
        } else {
            Vector3::new(0.0, 1.0 / a_eff, 0.0)
        };
        let var = (grad.transpose() * cov * grad)[(0, 0)];
        Ok((v.clamp(0.0, 1.0), var.max(0.0).sqrt()))
    };
    let (v_raw, v_raw_sigma) = vis(a)?;
    let (v_corr, v_corr_sigma) = vis(a - accidental_floor)?;
    let chsh = if v_raw_sigma > 0.0 { (v_raw - CHSH_VISIBILITY) / v_raw_sigma } else { f64::INFINITY.copysign(v_raw - CHSH_VISIBILITY) };
    Ok(VisibilityResult {
        v_raw,
        v_raw_sigma,
        v_corr,
        v_corr_sigma,
        phase_offset_rad: (-c).atan2(b),
        c0: a,
        accidental_floor,
        chsh_violation_sigmas: chsh,
        chsh_violated: chsh >= CHSH_FLAG_SIGMAS,
    })
}

/// JSON report of a Franson scan.
#[derive(Debug, Clone, Serialize)]
pub struct FransonReport {
    pub v_raw: f64,
    pub v_raw_sigma: f64,
    pub v_corr: f64,
    pub v_corr_sigma: f64,
    pub phase_offset_rad: f64,
    pub chsh_sigmas: f64,
    pub chsh_violated: bool,
    pub side_peak_p_value: f64,
    pub singles_signal_p_value: f64,
    pub singles_idler_p_value: f64,
    pub fwhm_ps: f64,
    pub per_phase: Vec<FringePoint>,
}

impl FransonReport {
    pub fn new(scan: &FringeScan, v: &VisibilityResult) -> Self {
        Self {
            v_raw: v.v_raw,
            v_raw_sigma: v.v_raw_sigma,
            v_corr: v.v_corr,
            v_corr_sigma: v.v_corr_sigma,
            phase_offset_rad: v.phase_offset_rad,
            chsh_sigmas: v.chsh_violation_sigmas,
            chsh_violated: v.chsh_violated,
            side_peak_p_value: scan.side_peak_p_value,
            singles_signal_p_value: scan.singles_signal_p_value,
            singles_idler_p_value: scan.singles_idler_p_value,
            fwhm_ps: scan.fwhm_ps,
            per_phase: scan.points.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct G2Point {
    pub tau_ps: f64,
    pub g2: f64,
    pub sigma: f64,
    pub n_s12: u64,
    pub n_s2: u64,
    /// Zero denominator; `g2` is NaN.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct G2Curve {
    pub window_ps: f64,
    pub n_s: u64,
    pub n_s1: u64,
    pub points: Vec<G2Point>,
}

impl G2Curve {
    /// Point closest to zero delay.
    pub fn at_zero(&self) -> Option<&G2Point> {
        self.points.iter().min_by(|a, b| a.tau_ps.abs().total_cmp(&b.tau_ps.abs()))
    }

    /// Pooled `g²` over all points with `|τ| > min_tau_ps`.
    pub fn tail(&self, min_tau_ps: f64) -> Option<(f64, f64)> {
        let tail: Vec<&G2Point> = self.points.iter().filter(|p| p.tau_ps.abs() > min_tau_ps && !p.flagged).collect();
        if tail.is_empty() || self.n_s1 == 0 {
            return None;
        }
        let s12: u64 = tail.iter().map(|p| p.n_s12).sum();
        let s2: u64 = tail.iter().map(|p| p.n_s2).sum();
        Some(g2_ratio(s12, self.n_s, self.n_s1, s2))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tau_ps,g2,sigma")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.tau_ps, p.g2, p.sigma)?;
        }
        Ok(())
    }
}

/// `g² = N_s12·N_s/(N_s1·N_s2)` with Poisson errors. A zero three-fold
/// count gets the one-count error.
fn g2_ratio(n_s12: u64, n_s: u64, n_s1: u64, n_s2: u64) -> (f64, f64) {
    let scale = n_s as f64 / (n_s1 as f64 * n_s2 as f64);
    let g2 = n_s12 as f64 * scale;
    let sigma = if n_s12 == 0 {
        scale
    } else {
        g2 * (1.0 / n_s12 as f64 + 1.0 / n_s as f64 + 1.0 / n_s1 as f64 + 1.0 / n_s2 as f64).sqrt()
    };
    (g2, sigma)
}

/// Number of sorted `times` in `[lo, hi)`.
fn count_in(times: &[i64], lo: i64, hi: i64) -> u64 {
    (times.partition_point(|&t| t < hi) - times.partition_point(|&t| t < lo)) as u64
}

/// Heralded `g²ₕ(τ)` on channels `(herald, arm1, arm2)`. Arm 1 is taken at
/// zero delay, arm 2 at each `τ`; all two- and three-fold counts use the
/// same window `[τ − w/2, τ + w/2)`.
pub fn g2_heralded(stream: &TagStream, channels: (u16, u16, u16), window_ps: f64, tau_grid_ps: &[f64]) -> Result<G2Curve> {
    let (s, i1, i2) = channels;
    for ch in [s, i1, i2] {
        if ch >= stream.channel_count() {
            return domain(format!("channel {ch} not present in a {}-channel stream", stream.channel_count()));
        }
    }
    if !(window_ps > 0.0) {
        return domain("window must be > 0");
    }
    let ts = stream.channel_times_ps(s);
    let t1 = stream.channel_times_ps(i1);
    let t2 = stream.channel_times_ps(i2);
    let half = |c: f64| ((c - 0.5 * window_ps).ceil() as i64, (c + 0.5 * window_ps).ceil() as i64);

    let max_tau = tau_grid_ps.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let span = (max_tau + window_ps).ceil() as i64 + 1;
    let res = stream.resolution_ps() as i64;
    // per-tick delay histograms give the two-fold counts exactly
    let h1 = histogram_times(&ts, &t1, res, span);
    let h2 = histogram_times(&ts, &t2, res, span);
    let twofold = |h: &CoincidenceHistogram, c: f64| {
        let (lo, hi) = half(c);
        let a = (lo.div_euclid(res) + i64::from(lo.rem_euclid(res) != 0) - h.first_bin()).clamp(0, h.len() as i64);
        let b = (hi.div_euclid(res) + i64::from(hi.rem_euclid(res) != 0) - h.first_bin()).clamp(a, h.len() as i64);
        h.sum(a as usize..b as usize)
    };
    let n_s = ts.len() as u64;
    let n_s1 = twofold(&h1, 0.0);

    // heralds with an arm-1 partner, with their multiplicity
    let (lo1, hi1) = half(0.0);
    let heralded: Vec<(i64, u64)> = ts
        .par_iter()
        .filter_map(|&t| {
            let c = count_in(&t1, t + lo1, t + hi1);
            (c > 0).then_some((t, c))
        })
        .collect();

    let points = tau_grid_ps
        .par_iter()
        .map(|&tau| {
            let (lo, hi) = half(tau);
            let n_s12: u64 = heralded.iter().map(|&(t, c1)| c1 * count_in(&t2, t + lo, t + hi)).sum();
            let n_s2 = twofold(&h2, tau);
            let flagged = n_s1 == 0 || n_s2 == 0 || n_s == 0;
            let (g2, sigma) = if flagged { (f64::NAN, f64::NAN) } else { g2_ratio(n_s12, n_s, n_s1, n_s2) };
            G2Point { tau_ps: tau, g2, sigma, n_s12, n_s2, flagged }
        })
        .collect();
    Ok(G2Curve { window_ps, n_s, n_s1, points })
}
