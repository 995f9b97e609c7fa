//! Sideband algebra of sinusoidal electro-optic phase modulation.
//!
//! A carrier passing a phase modulator of depth β and RF phase φ_m is
//! spread over lines `f0 + n·f_m` with amplitudes `J_n(β)·exp(i·n·(π/2 + φ_m))`.
//! The same coefficients describe the frequency-bin transfer of a single
//! photon through the modulator.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Maximum of `|J_1(β)|²`, reached at the first zero of `J_1'`.
pub const FIRST_ORDER_OPTIMAL_DEPTH: f64 = 1.841_183_781_340_659_3;

pub const DEFAULT_MAX_ORDER: u32 = 8;

/// Bessel functions of the first kind `J_0(x) ..= J_max_order(x)` for `x >= 0`.
///
/// Miller's downward recurrence, normalised with `J_0 + 2·Σ J_2k = 1`.
pub fn bessel_j_orders(max_order: u32, x: f64) -> Vec<f64> {
    let n_out = max_order as usize + 1;
    let mut out = vec![0.0; n_out];
    if x == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let ax = x.abs();
    let start = (max_order as usize).max(ax.ceil() as usize) + 30 + (ax.sqrt() * 8.0) as usize;
    let mut j_next = 0.0f64; // J_{k+1}
    let mut j_cur = 1e-300f64; // J_k
    let mut norm = 0.0f64;
    let mut values = vec![0.0; start + 1];
    values[start] = j_cur;
    for k in (1..=start).rev() {
        let j_prev = 2.0 * k as f64 / ax * j_cur - j_next;
        j_next = j_cur;
        j_cur = j_prev;
        values[k - 1] = j_cur;
        if j_cur.abs() > 1e250 {
            for v in values[k - 1..].iter_mut() {
                *v *= 1e-250;
            }
            j_cur *= 1e-250;
            j_next *= 1e-250;
        }
    }
    norm += values[0];
    for k in (2..=start).step_by(2) {
        norm += 2.0 * values[k];
    }
    for (k, o) in out.iter_mut().enumerate() {
        let v = values[k] / norm;
        // J_n(-x) = (-1)^n J_n(x)
        *o = if x < 0.0 && k % 2 == 1 { -v } else { v };
    }
    out
}

/// `J_n(x)` for any integer order.
pub fn bessel_j(n: i32, x: f64) -> f64 {
    let m = n.unsigned_abs();
    let v = bessel_j_orders(m, x)[m as usize];
    if n < 0 && m % 2 == 1 {
        -v
    } else {
        v
    }
}

/// RF drive of a phase modulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulatorSettings {
    pub mod_freq_ghz: f64,
    /// Peak phase deviation β in radians.
    pub mod_depth_rad: f64,
    /// RF phase φ_m in radians.
    #[serde(default)]
    pub mod_phase_rad: f64,
    /// Sidebands `-N..=N` are retained.
    #[serde(default = "default_max_order")]
    pub max_order: u32,
}

fn default_max_order() -> u32 {
    DEFAULT_MAX_ORDER
}

impl ModulatorSettings {
    pub fn new(mod_freq_ghz: f64, mod_depth_rad: f64, mod_phase_rad: f64) -> Result<Self> {
        let s = Self {
            mod_freq_ghz,
            mod_depth_rad,
            mod_phase_rad,
            max_order: DEFAULT_MAX_ORDER,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.mod_phase_rad = phase;
        self
    }

    pub fn with_max_order(mut self, max_order: u32) -> Result<Self> {
        self.max_order = max_order;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mod_depth_rad >= 0.0) || !self.mod_depth_rad.is_finite() {
            return domain(format!("modulation depth must be >= 0, got {}", self.mod_depth_rad));
        }
        if !(self.mod_freq_ghz > 0.0) || !self.mod_freq_ghz.is_finite() {
            return domain(format!("modulation frequency must be > 0, got {}", self.mod_freq_ghz));
        }
        if !self.mod_phase_rad.is_finite() {
            return domain("modulation phase must be finite");
        }
        if self.max_order < 1 {
            return domain("max_order must be >= 1");
        }
        let kept = self.truncated_power();
        if kept < 1.0 - 1e-6 {
            return domain(format!(
                "max_order {} keeps only {kept:.9} of the power at depth {}",
                self.max_order, self.mod_depth_rad
            ));
        }
        Ok(())
    }

    /// `Σ_{|n|<=N} J_n(β)²`.
    pub fn truncated_power(&self) -> f64 {
        let j = bessel_j_orders(self.max_order, self.mod_depth_rad);
        j[0] * j[0] + 2.0 * j[1..].iter().map(|v| v * v).sum::<f64>()
    }

    /// Complex amplitude of sideband `n` (zero beyond `max_order`).
    pub fn coefficient(&self, n: i32) -> Complex64 {
        if n.unsigned_abs() > self.max_order {
            return Complex64::new(0.0, 0.0);
        }
        let phase = n as f64 * (FRAC_PI_2 + self.mod_phase_rad);
        Complex64::from_polar(1.0, phase) * bessel_j(n, self.mod_depth_rad)
    }

    /// Coefficients for orders `-N..=N`, index `n + N`.
    pub fn coefficients(&self) -> Vec<Complex64> {
        let n = self.max_order as i32;
        let j = bessel_j_orders(self.max_order, self.mod_depth_rad);
        (-n..=n)
            .map(|k| {
                let m = k.unsigned_abs() as usize;
                let jk = if k < 0 && m % 2 == 1 { -j[m] } else { j[m] };
                Complex64::from_polar(1.0, k as f64 * (FRAC_PI_2 + self.mod_phase_rad)) * jk
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CombLine {
    pub order: i32,
    pub freq_ghz: f64,
    pub amp: Complex64,
}

/// Optical lines produced by phase-modulating one carrier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CombSpectrum {
    pub lines: Vec<CombLine>,
    pub source_carrier_ghz: f64,
}

impl CombSpectrum {
    pub fn total_power(&self) -> f64 {
        self.lines.iter().map(|l| l.amp.norm_sqr()).sum()
    }

    pub fn line(&self, order: i32) -> Option<&CombLine> {
        self.lines.iter().find(|l| l.order == order)
    }

    /// Writes `freq_ghz,re,im,power_db`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "freq_ghz,re,im,power_db")?;
        for l in &self.lines {
            let p = l.amp.norm_sqr();
            let db = if p > 0.0 { 10.0 * p.log10() } else { f64::NEG_INFINITY };
            writeln!(w, "{},{},{},{}", l.freq_ghz, l.amp.re, l.amp.im, db)?;
        }
        Ok(())
    }
}

/// Spectrum of a carrier after the modulator. Lines with exactly zero
/// amplitude are omitted.
pub fn modulate(carrier_ghz: f64, settings: &ModulatorSettings) -> Result<CombSpectrum> {
    settings.validate()?;
    let n = settings.max_order as i32;
    let lines = settings
        .coefficients()
        .into_iter()
        .zip(-n..=n)
        .filter(|(amp, _)| amp.norm_sqr() > 0.0)
        .map(|(amp, order)| CombLine {
            order,
            freq_ghz: carrier_ghz + order as f64 * settings.mod_freq_ghz,
            amp,
        })
        .collect();
    Ok(CombSpectrum { lines, source_carrier_ghz: carrier_ghz })
}

/// Output frequency bins and amplitudes for a single photon entering the
/// modulator in bin `bin_ghz`.
pub fn apply_to_photon(bin_ghz: f64, settings: &ModulatorSettings) -> Result<Vec<(f64, Complex64)>> {
    Ok(modulate(bin_ghz, settings)?
        .lines
        .into_iter()
        .map(|l| (l.freq_ghz, l.amp))
        .collect())
}

/// Depth in `[lo, hi]` maximising the power in the first-order sidebands,
/// by golden-section search on `J_1(β)²`.
pub fn optimize_depth_for_first_order(lo: f64, hi: f64) -> Result<f64> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() || lo < 0.0 {
        return domain(format!("invalid bracket [{lo}, {hi}]"));
    }
    if hi - lo < 1e-15 {
        return Ok(lo);
    }
    let f = |b: f64| {
        let j = bessel_j(1, b);
        j * j
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-10 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Fourier coefficients of exp(iβ cos(θ + φ)) over one RF period.
    fn fourier_oracle(beta: f64, phi: f64, n: i32) -> Complex64 {
        let m = 512;
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..m {
            let theta = 2.0 * PI * k as f64 / m as f64;
            let field = Complex64::from_polar(1.0, beta * (theta + phi).cos());
            acc += field * Complex64::from_polar(1.0, -(n as f64) * theta);
        }
        acc / m as f64
    }

    fn wrap(x: f64) -> f64 {
        (x + PI).rem_euclid(2.0 * PI) - PI
    }

    #[test]
    fn bessel_reference_values() {
        // Abramowitz & Stegun table 9.1
        let cases = [
            (0, 1.0, 0.765_197_686_557_966_6),
            (1, 1.0, 0.440_050_585_744_933_5),
            (2, 1.0, 0.114_903_484_931_900_5),
            (0, 2.5, -0.048_383_776_468_197_6),
            (1, 3.0, 0.339_058_958_525_936_5),
            (5, 3.0, 0.043_028_434_877_047_6),
        ];
        for (n, x, want) in cases {
            assert!((bessel_j(n, x) - want).abs() < 1e-13, "J_{n}({x})");
        }
        assert!((bessel_j(-1, 1.0) + bessel_j(1, 1.0)).abs() < 1e-16);
        assert_eq!(bessel_j(3, 0.0), 0.0);
        assert_eq!(bessel_j(0, 0.0), 1.0);
    }

    #[test]
    fn unmodulated_carrier() {
        let s = ModulatorSettings::new(12.5, 0.0, 0.3).unwrap();
        let c = modulate(100.0, &s).unwrap();
        assert_eq!(c.lines.len(), 1);
        assert_eq!(c.lines[0].freq_ghz, 100.0);
        assert!((c.lines[0].amp - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        let map = apply_to_photon(50.0, &s).unwrap();
        assert_eq!(map, vec![(50.0, Complex64::new(1.0, 0.0))]);
    }

    #[test]
    fn first_order_at_optimal_depth() {
        let s = ModulatorSettings::new(18.0, 1.8412, 0.0).unwrap();
        let c = modulate(0.0, &s).unwrap();
        let plus = c.line(1).unwrap();
        assert!((plus.amp.norm_sqr() - 0.3386).abs() < 1e-4);
        assert!((plus.amp.arg() - PI / 2.0).abs() < 1e-12);
        assert!((plus.amp - fourier_oracle(1.8412, 0.0, 1)).norm() < 1e-12);
        assert_eq!(plus.freq_ghz, 18.0);
    }

    #[test]
    fn plus_minus_phase_difference_is_twice_rf_phase() {
        let s = ModulatorSettings::new(18.0, 1.0, PI / 4.0).unwrap();
        let c = modulate(0.0, &s).unwrap();
        let d = c.line(1).unwrap().amp.arg() - c.line(-1).unwrap().amp.arg();
        assert!(wrap(d - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_bin_relative_phase() {
        // bins 2 f_m apart meet in the middle through orders -1 and +1
        let s = ModulatorSettings::new(18.0, 1.2, 0.37).unwrap();
        let upper = apply_to_photon(36.0, &s).unwrap();
        let lower = apply_to_photon(0.0, &s).unwrap();
        let from_upper = upper.iter().find(|(f, _)| (*f - 18.0).abs() < 1e-9).unwrap().1;
        let from_lower = lower.iter().find(|(f, _)| (*f - 18.0).abs() < 1e-9).unwrap().1;
        let rel = (from_lower / from_upper).arg();
        // the J_{-1} = -J_1 sign cancels the π between the two order phases
        assert!(wrap(rel - 2.0 * 0.37).abs() < 1e-12);
        assert!((from_lower.norm() - from_upper.norm()).abs() < 1e-15);
    }

    #[test]
    fn power_balance() {
        for beta in [0.3, 1.0, 1.841, 2.0] {
            let s = ModulatorSettings::new(10.0, beta, 0.1).unwrap();
            let map = apply_to_photon(0.0, &s).unwrap();
            let p: f64 = map.iter().map(|(_, a)| a.norm_sqr()).sum();
            assert!((p - 1.0).abs() < 1e-9, "beta {beta}: {p}");
        }
    }

    #[test]
    fn truncation_guard() {
        assert!(ModulatorSettings::new(10.0, 6.0, 0.0).is_err());
        assert!(ModulatorSettings {
            mod_freq_ghz: 10.0,
            mod_depth_rad: 6.0,
            mod_phase_rad: 0.0,
            max_order: 16
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn optimal_depth_search() {
        let b = optimize_depth_for_first_order(0.0, 3.0).unwrap();
        // dense-grid oracle
        let grid_best = (0..=300_000)
            .map(|k| k as f64 * 1e-5)
            .max_by(|a, b| {
                let fa = bessel_j(1, *a).powi(2);
                let fb = bessel_j(1, *b).powi(2);
                fa.partial_cmp(&fb).unwrap()
            })
            .unwrap();
        assert!((b - grid_best).abs() < 1e-4);
        assert!((b - 1.8412).abs() < 1e-3);
        assert!((b - FIRST_ORDER_OPTIMAL_DEPTH).abs() < 1e-7);
        assert_eq!(optimize_depth_for_first_order(0.0, 0.0).unwrap(), 0.0);
        let f = |x: f64| bessel_j(1, x).powi(2);
        assert!(f(b) > f(b + 0.2) && f(b) > f(b - 0.2));
    }

    #[test]
    fn csv_has_header_and_lines() {
        let s = ModulatorSettings::new(12.5, 1.0, 0.0).unwrap();
        let c = modulate(193_000.0, &s).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("freq_ghz,re,im,power_db\n"));
        assert_eq!(text.lines().count(), c.lines.len() + 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matches_fourier_decomposition(beta in 0.0f64..3.0, phi_idx in 0usize..3, n in -5i32..=5) {
                let phi = [0.0, PI / 7.0, PI / 2.0][phi_idx];
                let s = ModulatorSettings::new(1.0, beta, phi).unwrap();
                prop_assert!((s.coefficient(n) - fourier_oracle(beta, phi, n)).norm() < 1e-9);
            }

            #[test]
            fn phase_law(beta in 0.05f64..3.0, phi in -3.0f64..3.0) {
                let s = ModulatorSettings::new(1.0, beta, phi).unwrap();
                for l in modulate(0.0, &s).unwrap().lines {
                    if l.amp.norm() > 1e-12 {
                        // the order phase n(π/2 + φ_m) up to the sign of the real J_n(β)
                        let sign = bessel_j(l.order, beta).signum();
                        let expected = Complex64::from_polar(sign, l.order as f64 * (PI / 2.0 + phi));
                        prop_assert!((l.amp / l.amp.norm() - expected).norm() < 1e-9);
                    }
                }
            }

            #[test]
            fn carrier_shift_covariance(beta in 0.0f64..2.0, shift in -1e3f64..1e3) {
                let s = ModulatorSettings::new(12.5, beta, 0.2).unwrap();
                let a = modulate(193_000.0, &s).unwrap();
                let b = modulate(193_000.0 + shift, &s).unwrap();
                prop_assert_eq!(a.lines.len(), b.lines.len());
                for (x, y) in a.lines.iter().zip(&b.lines) {
                    prop_assert!((y.freq_ghz - x.freq_ghz - shift).abs() < 1e-6);
                    prop_assert_eq!(x.amp, y.amp);
                }
                prop_assert!(a.total_power() <= 1.0 + 1e-12);
            }
        }
    }
}
