//! Small fitting helpers shared by the sweep and scan analyses.

use serde::Serialize;

use crate::error::{domain, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerLaw {
    /// `ln` of the prefactor.
    pub log_prefactor: f64,
    pub exponent: f64,
    pub exponent_sigma: f64,
}

impl PowerLaw {
    pub fn eval(&self, x: f64) -> f64 {
        (self.log_prefactor + self.exponent * x.ln()).exp()
    }
}

/// Poisson maximum-likelihood fit of `counts_i ~ Poisson(exposure_i·c·x_i^k)`
/// by Newton iteration on the log link. Zero counts are handled naturally.
pub fn poisson_power_law(x: &[f64], counts: &[f64], exposure: &[f64]) -> Result<PowerLaw> {
    if x.len() != counts.len() || x.len() != exposure.len() {
        return domain("power-law inputs differ in length");
    }
    if x.len() < 2 {
        return domain("power-law fit needs at least two points");
    }
    if x.iter().chain(exposure).any(|v| !(*v > 0.0)) {
        return domain("abscissae and exposures must be > 0");
    }
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) {
        return domain("power-law fit needs at least one count");
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    // start from the weighted log-log line through the non-zero points
    let mut k = {
        let pts: Vec<(f64, f64, f64)> = lx
            .iter()
            .zip(counts)
            .zip(exposure)
            .filter(|((_, c), _)| **c > 0.0)
            .map(|((l, c), e)| (*l, (c / e).ln(), *c))
            .collect();
        if pts.len() >= 2 {
            weighted_line(&pts).map_or(1.0, |(_, s, _)| s)
        } else {
            1.0
        }
    };
    let mut a = (total / exposure.iter().zip(&lx).map(|(e, l)| e * (k * l).exp()).sum::<f64>()).ln();
    let mut info = [[0.0; 2]; 2];
    for _ in 0..100 {
        let (mut g0, mut g1) = (0.0, 0.0);
        info = [[0.0; 2]; 2];
        for i in 0..x.len() {
            let mu = exposure[i] * (a + k * lx[i]).exp();
            let r = counts[i] - mu;
            g0 += r;
            g1 += r * lx[i];
            info[0][0] += mu;
            info[0][1] += mu * lx[i];
            info[1][1] += mu * lx[i] * lx[i];
        }
        let det = info[0][0] * info[1][1] - info[0][1] * info[0][1];
        if !(det > 0.0) {
            return domain("degenerate abscissae in power-law fit");
        }
        let da = (info[1][1] * g0 - info[0][1] * g1) / det;
        let dk = (info[0][0] * g1 - info[0][1] * g0) / det;
        // damp wild first steps
        let s = (2.0 / dk.abs().max(da.abs())).min(1.0);
        a += s * da;
        k += s * dk;
        if dk.abs() < 1e-12 && da.abs() < 1e-12 {
            break;
        }
    }
    let det = info[0][0] * info[1][1] - info[0][1] * info[0][1];
    Ok(PowerLaw { log_prefactor: a, exponent: k, exponent_sigma: (info[0][0] / det).sqrt() })
}

/// Weighted least-squares line through `(x, y, weight)`; returns
/// `(intercept, slope, slope_sigma)` with the sigma from the weights.
pub fn weighted_line(pts: &[(f64, f64, f64)]) -> Result<(f64, f64, f64)> {
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y, w) in pts {
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let det = sw * sxx - sx * sx;
    if pts.len() < 2 || !(det.abs() > 1e-300) {
        return domain("line fit needs two distinct abscissae");
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    Ok((intercept, slope, (sw / det).sqrt()))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Logarithmically spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}
