//! Start-stop coincidence histograms, Gaussian peak fits and the pair
//! metrics derived from them (N_cc, N_acc, CAR, on-chip rate).

use std::io::{BufRead, Write};
use std::ops::Range;

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::tags::TagStream;
use crate::FWHM_PER_SIGMA;

/// Signal tags handled per parallel chunk while histogramming.
const CHUNK: usize = 1 << 15;

/// Counts of idler-minus-signal delays in half-open bins `[kΔ, (k+1)Δ)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoincidenceHistogram {
    bin_width_ps: i64,
    first_bin: i64,
    counts: Vec<u64>,
    total_integration_s: f64,
}

impl CoincidenceHistogram {
    pub fn from_counts(bin_width_ps: i64, first_bin: i64, counts: Vec<u64>, total_integration_s: f64) -> Result<Self> {
        if bin_width_ps <= 0 {
            return domain("bin width must be >= 1 ps");
        }
        Ok(Self { bin_width_ps, first_bin, counts, total_integration_s })
    }

    pub fn bin_width_ps(&self) -> i64 {
        self.bin_width_ps
    }
    pub fn first_bin(&self) -> i64 {
        self.first_bin
    }
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
    pub fn len(&self) -> usize {
        self.counts.len()
    }
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
    pub fn total_integration_s(&self) -> f64 {
        self.total_integration_s
    }
    pub fn set_integration_s(&mut self, seconds: f64) {
        self.total_integration_s = seconds;
    }

    /// Bin indices `k` (bin `k` starts at `k·Δ`).
    pub fn delays(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.counts.len() as i64).map(move |i| self.first_bin + i)
    }

    pub fn bin_start_ps(&self, i: usize) -> i64 {
        (self.first_bin + i as i64) * self.bin_width_ps
    }

    pub fn bin_center_ps(&self, i: usize) -> f64 {
        (self.first_bin as f64 + i as f64 + 0.5) * self.bin_width_ps as f64
    }

    /// Array indices of the bins whose centres lie in `[center − w/2, center + w/2)`.
    pub fn window_bins(&self, center_ps: f64, width_ps: f64) -> Range<usize> {
        let d = self.bin_width_ps as f64;
        let off = self.first_bin as f64 + 0.5;
        let n = self.counts.len() as f64;
        let lo = ((center_ps - 0.5 * width_ps) / d - off).ceil().clamp(0.0, n);
        let hi = ((center_ps + 0.5 * width_ps) / d - off).ceil().clamp(0.0, n);
        lo as usize..hi.max(lo) as usize
    }

    pub fn sum(&self, bins: Range<usize>) -> u64 {
        self.counts[bins].iter().sum()
    }

    /// Bins whose start lies in `[lo_ps, hi_ps)`.
    pub fn slice(&self, lo_ps: i64, hi_ps: i64) -> Self {
        let w = self.bin_width_ps;
        let n = self.counts.len() as i64;
        let a = (lo_ps.div_euclid(w) + i64::from(lo_ps.rem_euclid(w) != 0) - self.first_bin).clamp(0, n);
        let b = (hi_ps.div_euclid(w) + i64::from(hi_ps.rem_euclid(w) != 0) - self.first_bin).clamp(a, n);
        Self {
            bin_width_ps: w,
            first_bin: self.first_bin + a,
            counts: self.counts[a as usize..b as usize].to_vec(),
            total_integration_s: self.total_integration_s,
        }
    }

    /// Writes `delay_ps,counts`, delay being the bin start. The integration
    /// time goes into a leading `# integration_s=` comment.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# integration_s={}", self.total_integration_s)?;
        writeln!(w, "delay_ps,counts")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{}", self.bin_start_ps(i), c)?;
        }
        Ok(())
    }

    /// Reads the format of [`write_csv`](Self::write_csv). Bins must be
    /// contiguous and evenly spaced; a missing integration comment leaves
    /// the integration time at zero.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut rows: Vec<(i64, u64)> = Vec::new();
        let mut total_integration_s = 0.0;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if let Some(v) = t.strip_prefix("# integration_s=") {
                total_integration_s = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("line {}: bad integration time `{v}`", n + 1)))?;
                continue;
            }
            if t.is_empty() || t.starts_with('#') || t.starts_with("delay") {
                continue;
            }
            let mut parts = t.split(',');
            let parse_err = || Error::Format(format!("line {}: expected `delay_ps,counts`, got `{t}`", n + 1));
            let d = parts.next().and_then(|s| s.trim().parse::<i64>().ok()).ok_or_else(parse_err)?;
            let c = parts.next().and_then(|s| s.trim().parse::<u64>().ok()).ok_or_else(parse_err)?;
            rows.push((d, c));
        }
        if rows.len() < 2 {
            return Err(Error::Format("histogram needs at least two bins".into()));
        }
        let w = rows[1].0 - rows[0].0;
        if w <= 0 {
            return Err(Error::Format("delays must increase".into()));
        }
        for (k, pair) in rows.windows(2).enumerate() {
            if pair[1].0 - pair[0].0 != w {
                return Err(Error::Format(format!("uneven bin spacing at row {}", k + 2)));
            }
        }
        if rows[0].0.rem_euclid(w) != 0 {
            return Err(Error::Format("bin starts must be multiples of the bin width".into()));
        }
        Ok(Self {
            bin_width_ps: w,
            first_bin: rows[0].0 / w,
            counts: rows.into_iter().map(|r| r.1).collect(),
            total_integration_s,
        })
    }

    /// Element-wise sum of histograms with identical binning.
    pub fn merged(&self, other: &Self) -> Result<Self> {
        if self.bin_width_ps != other.bin_width_ps || self.first_bin != other.first_bin || self.len() != other.len() {
            return domain("histograms have different binning");
        }
        Ok(Self {
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
            total_integration_s: self.total_integration_s + other.total_integration_s,
            ..self.clone()
        })
    }
}

/// Duration covered by a stream, from zero to its last tag.
pub fn stream_duration_s(stream: &TagStream) -> f64 {
    stream.records().last().map_or(0.0, |r| r.timestamp as f64 * stream.resolution_ps() as f64 * 1e-12)
}

/// Multi-stop histogram of `t_idler − t_signal` for all pairs within `±span_ps`.
///
/// A two-pointer sweep over the sorted channel lists; the work is split
/// into fixed chunks of signal tags and summed, so the result does not
/// depend on the thread count.
pub fn histogram(stream: &TagStream, ch_signal: u16, ch_idler: u16, bin_width_ps: i64, span_ps: i64) -> Result<CoincidenceHistogram> {
    if bin_width_ps < stream.resolution_ps() as i64 {
        return domain(format!(
            "bin width {bin_width_ps} ps below the stream resolution {} ps",
            stream.resolution_ps()
        ));
    }
    if span_ps < bin_width_ps {
        return domain(format!("span {span_ps} ps is smaller than the bin width {bin_width_ps} ps"));
    }
    let signal = stream.channel_times_ps(ch_signal);
    let idler = stream.channel_times_ps(ch_idler);
    let mut h = histogram_times(&signal, &idler, bin_width_ps, span_ps);
    h.total_integration_s = stream_duration_s(stream);
    Ok(h)
}

/// Histogram of two sorted timestamp lists in ps.
pub fn histogram_times(signal: &[i64], idler: &[i64], bin_width_ps: i64, span_ps: i64) -> CoincidenceHistogram {
    let first_bin = (-span_ps).div_euclid(bin_width_ps);
    let last_bin = span_ps.div_euclid(bin_width_ps);
    let nbins = (last_bin - first_bin + 1) as usize;
    let counts = signal
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut counts = vec![0u64; nbins];
            let Some(&first) = chunk.first() else { return counts };
            let mut lo = idler.partition_point(|&t| t < first - span_ps);
            for &ts in chunk {
                while lo < idler.len() && idler[lo] < ts - span_ps {
                    lo += 1;
                }
                let mut k = lo;
                while k < idler.len() && idler[k] <= ts + span_ps {
                    let d = idler[k] - ts;
                    counts[(d.div_euclid(bin_width_ps) - first_bin) as usize] += 1;
                    k += 1;
                }
            }
            counts
        })
        .reduce(
            || vec![0u64; nbins],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    CoincidenceHistogram { bin_width_ps, first_bin, counts, total_integration_s: 0.0 }
}

/// Result of the weighted Gaussian-plus-baseline fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakFit {
    pub amplitude: f64,
    pub mean_ps: f64,
    pub sigma_ps: f64,
    /// Counts per bin.
    pub baseline: f64,
    pub fwhm_ps: f64,
    /// Parameter order: amplitude, mean, sigma, baseline.
    pub covariance: [[f64; 4]; 4],
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
}

impl PeakFit {
    /// Fit with a fixed width and position, e.g. when the jitter is known.
    pub fn fixed(mean_ps: f64, fwhm_ps: f64) -> Self {
        Self {
            amplitude: 0.0,
            mean_ps,
            sigma_ps: fwhm_ps / FWHM_PER_SIGMA,
            baseline: 0.0,
            fwhm_ps,
            covariance: [[0.0; 4]; 4],
            chi2: 0.0,
            dof: 0,
            iterations: 0,
        }
    }

    pub fn sigma_error_ps(&self) -> f64 {
        self.covariance[2][2].max(0.0).sqrt()
    }
}

fn median(values: &[u64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2]) as f64
    }
}

const MAX_ITER: usize = 200;
const STEP_TOL: f64 = 1e-8;

/// Levenberg-Marquardt fit of `A·exp(−(τ−μ)²/2σ²) + b` with per-bin
/// weights `1/max(count, 1)`.
pub fn fit_gaussian(hist: &CoincidenceHistogram) -> Result<PeakFit> {
    let n = hist.len();
    if n < 5 {
        return Err(Error::FitFailed { reason: format!("only {n} bins"), residuals: vec![] });
    }
    let x: Vec<f64> = (0..n).map(|i| hist.bin_center_ps(i)).collect();
    let y: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();
    let w: Vec<f64> = hist.counts.iter().map(|&c| 1.0 / (c.max(1) as f64)).collect();

    let (imax, &ymax) = hist.counts.iter().enumerate().max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i))).unwrap();
    let b0 = median(&hist.counts);
    let a0 = ymax as f64 - b0;
    if a0 < 10.0 {
        return Err(Error::FitFailed {
            reason: format!("peak only {a0} counts above the baseline (need >= 10)"),
            residuals: y.iter().map(|v| v - b0).collect(),
        });
    }
    // second moment of the excess over the contiguous peak region
    let thresh = a0 / 20.0;
    let mut lo = imax;
    while lo > 0 && y[lo - 1] - b0 > thresh {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < n && y[hi + 1] - b0 > thresh {
        hi += 1;
    }
    let mu0 = x[imax];
    let (mut m0, mut m2) = (0.0, 0.0);
    for i in lo..=hi {
        let e = (y[i] - b0).max(0.0);
        m0 += e;
        m2 += e * (x[i] - mu0).powi(2);
    }
    let bw = hist.bin_width_ps as f64;
    let sigma_min = 0.05 * bw;
    let sigma_max = (x[n - 1] - x[0]).abs();
    let sigma0 = (m2 / m0).sqrt().max(0.5 * bw);

    let model = |p: &Vector4<f64>, xi: f64| {
        let z = (xi - p[1]) / p[2];
        p[0] * (-0.5 * z * z).exp() + p[3]
    };
    let chi2_of = |p: &Vector4<f64>| -> f64 {
        x.iter().zip(&y).zip(&w).map(|((xi, yi), wi)| wi * (yi - model(p, *xi)).powi(2)).sum()
    };
    let normal_eq = |p: &Vector4<f64>| -> (Matrix4<f64>, Vector4<f64>) {
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for ((xi, yi), wi) in x.iter().zip(&y).zip(&w) {
            let z = (xi - p[1]) / p[2];
            let g = (-0.5 * z * z).exp();
            let grad = Vector4::new(g, p[0] * g * z / p[2], p[0] * g * z * z / p[2], 1.0);
            let r = yi - (p[0] * g + p[3]);
            jtj += grad * grad.transpose() * *wi;
            jtr += grad * (r * wi);
        }
        (jtj, jtr)
    };

    let mut p = Vector4::new(a0, mu0, sigma0, b0);
    let mut chi2 = chi2_of(&p);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let (jtj, jtr) = normal_eq(&p);
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj;
            for k in 0..4 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + step;
            if !(trial[2] > 0.0) {
                lambda *= 10.0;
                continue;
            }
            let c = chi2_of(&trial);
            if c.is_finite() && c <= chi2 {
                let scale = Vector4::new(p[0].abs().max(1e-12), p[1].abs().max(bw), p[2].abs(), p[3].abs().max(1.0));
                let rel = step.component_div(&scale).amax();
                p = trial;
                let dchi = chi2 - c;
                chi2 = c;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < STEP_TOL || dchi <= 1e-15 * chi2.max(1e-300) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no downhill step left: at the minimum within floating-point noise
            converged = true;
        }
        if converged {
            break;
        }
    }
    let residuals: Vec<f64> = x.iter().zip(&y).map(|(xi, yi)| yi - model(&p, *xi)).collect();
    if !converged {
        return Err(Error::FitFailed { reason: format!("no convergence in {MAX_ITER} iterations"), residuals });
    }
    if !(p[2] > sigma_min && p[2] < sigma_max) {
        return Err(Error::FitFailed {
            reason: format!("sigma {} ps outside [{sigma_min}, {sigma_max}]", p[2]),
            residuals,
        });
    }
    if !(p[0] > 0.0) {
        return Err(Error::FitFailed { reason: "non-positive peak amplitude".into(), residuals });
    }
    let (jtj, _) = normal_eq(&p);
    let cov = jtj
        .try_inverse()
        .ok_or_else(|| Error::FitFailed { reason: "singular normal matrix".into(), residuals: residuals.clone() })?;
    let mut covariance = [[0.0; 4]; 4];
    for (r, row) in covariance.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = cov[(r, c)];
        }
    }
    Ok(PeakFit {
        amplitude: p[0],
        mean_ps: p[1],
        sigma_ps: p[2],
        baseline: p[3],
        fwhm_ps: FWHM_PER_SIGMA * p[2],
        covariance,
        chi2,
        dof: n.saturating_sub(4),
        iterations,
    })
}

/// How accidental windows are placed away from the peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccidentalPolicy {
    /// Total windows, split evenly between both sides.
    pub windows: usize,
    /// Minimum accepted number of windows.
    pub min_windows: usize,
    /// Distance of the first window from the peak centre, in FWHM.
    pub gap_fwhm: f64,
}

impl Default for AccidentalPolicy {
    fn default() -> Self {
        Self { windows: 20, min_windows: 10, gap_fwhm: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMetrics {
    pub n_cc: u64,
    /// Mean accidental counts per window.
    pub n_acc: f64,
    pub car: f64,
    pub car_sigma: f64,
    /// Set when no accidentals were observed; `car` then uses one count.
    pub car_lower_bound: bool,
    pub window_ps: f64,
    pub r_detected_hz: f64,
    pub r_onchip_hz: f64,
    pub accidental_windows: usize,
}

/// Sum over the same-width windows tiled outward from the excluded range
/// `[exclude_lo_ps, exclude_hi_ps]`, `windows / 2` per side.
pub fn accidental_windows(
    hist: &CoincidenceHistogram,
    exclude_lo_ps: f64,
    exclude_hi_ps: f64,
    bins_per_window: usize,
    windows: usize,
) -> Vec<u64> {
    let d = hist.bin_width_ps as f64;
    let n = hist.len() as i64;
    let m = bins_per_window.max(1) as i64;
    let per_side = (windows / 2) as i64;
    let right0 = (exclude_hi_ps / d).ceil() as i64 - hist.first_bin;
    let left0 = (exclude_lo_ps / d).floor() as i64 - hist.first_bin;
    let mut sums = Vec::new();
    for j in 0..per_side {
        let a = right0 + j * m;
        if a >= 0 && a + m <= n {
            sums.push(hist.sum(a as usize..(a + m) as usize));
        }
        let b = left0 - j * m;
        if b - m >= 0 && b <= n {
            sums.push(hist.sum((b - m) as usize..b as usize));
        }
    }
    sums
}

/// Windowed metrics around a peak at `center_ps` of width `fwhm_ps`.
pub fn metrics_at(
    hist: &CoincidenceHistogram,
    center_ps: f64,
    fwhm_ps: f64,
    window_ps: f64,
    eta_signal: f64,
    eta_idler: f64,
    policy: &AccidentalPolicy,
) -> Result<PairMetrics> {
    if !(window_ps > 0.0) {
        return domain(format!("window must be > 0, got {window_ps} ps"));
    }
    if !(eta_signal > 0.0 && eta_idler > 0.0) {
        return domain("efficiencies must be > 0");
    }
    let central = hist.window_bins(center_ps, window_ps);
    let m = central.len();
    let n_cc = hist.sum(central);
    let gap = policy.gap_fwhm * fwhm_ps;
    let m_acc = m.max(1);
    let sums = accidental_windows(hist, center_ps - gap, center_ps + gap, m_acc, policy.windows);
    if sums.len() < policy.min_windows {
        return domain(format!(
            "only {} accidental windows fit in the histogram span (need {})",
            sums.len(),
            policy.min_windows
        ));
    }
    let n_acc = sums.iter().sum::<u64>() as f64 / sums.len() as f64 * m as f64 / m_acc as f64;
    let (car, car_sigma, lower) = car_with_error(n_cc as f64, n_acc);
    let t = hist.total_integration_s;
    let r_detected_hz = if t > 0.0 { n_cc as f64 / t } else { f64::NAN };
    Ok(PairMetrics {
        n_cc,
        n_acc,
        car,
        car_sigma,
        car_lower_bound: lower,
        window_ps,
        r_detected_hz,
        r_onchip_hz: r_detected_hz / (eta_signal * eta_idler),
        accidental_windows: sums.len(),
    })
}

/// `(CAR, δCAR, lower_bound)` with Poisson propagation. A zero accidental
/// count is replaced by one and flagged.
pub fn car_with_error(n_cc: f64, n_acc: f64) -> (f64, f64, bool) {
    let (acc, lower) = if n_acc > 0.0 { (n_acc, false) } else { (1.0, true) };
    let car = (n_cc - acc) / acc;
    let rel = if n_cc > 0.0 { (1.0 / n_cc + 1.0 / acc).sqrt() } else { f64::NAN };
    (car, car.abs() * rel, lower)
}

/// Pair metrics in a window centred on the fitted peak.
pub fn metrics(hist: &CoincidenceHistogram, fit: &PeakFit, window_ps: f64, eta_signal: f64, eta_idler: f64) -> Result<PairMetrics> {
    metrics_at(hist, fit.mean_ps, fit.fwhm_ps, window_ps, eta_signal, eta_idler, &AccidentalPolicy::default())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub window_ps: f64,
    pub n_cc: u64,
    pub n_acc: f64,
    pub car: f64,
    pub rate_hz: f64,
}

/// Metrics for every window in `windows` plus the fitted FWHM.
pub fn window_sweep(
    hist: &CoincidenceHistogram,
    fit: &PeakFit,
    windows: &[f64],
    eta_signal: f64,
    eta_idler: f64,
) -> Result<Vec<SweepRow>> {
    let mut ws: Vec<f64> = windows.to_vec();
    ws.push(fit.fwhm_ps);
    ws.sort_by(|a, b| a.total_cmp(b));
    ws.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    ws.into_iter()
        .map(|w| {
            let m = metrics(hist, fit, w, eta_signal, eta_idler)?;
            Ok(SweepRow { window_ps: w, n_cc: m.n_cc, n_acc: m.n_acc, car: m.car, rate_hz: m.r_detected_hz })
        })
        .collect()
}
