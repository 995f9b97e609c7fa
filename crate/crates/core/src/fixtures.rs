//! Recorded-shape fixtures bundled with the crate.
//!
//! The histograms are built so that the published window counts come out
//! exactly: the accidental floor repeats with a period of one analysis
//! window, so every window away from the peak holds the same total, and
//! the excess inside the central window is fixed by construction.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use crate::coincidence::CoincidenceHistogram;
use crate::error::Result;
use crate::rng::{substream, Domain};
use crate::FWHM_PER_SIGMA;

/// Parameters of a peak-over-periodic-floor histogram.
#[derive(Debug, Clone, Copy)]
pub struct PeakFixture {
    pub bin_width_ps: i64,
    pub window_ps: f64,
    pub fwhm_ps: f64,
    pub n_cc: u64,
    pub n_acc: u64,
    pub integration_s: f64,
    pub span_ps: i64,
    /// Peak-to-peak jitter of the floor, in counts per bin.
    pub floor_noise: i64,
    pub seed: u64,
}

/// Ring-2 pair source, 60 s at 67.3 µW, 17 ps bins.
pub const RING2_PEAK: PeakFixture = PeakFixture {
    bin_width_ps: 17,
    window_ps: 867.0,
    fwhm_ps: 867.0,
    n_cc: 446_856,
    n_acc: 12_090,
    integration_s: 60.0,
    span_ps: 20_000,
    floor_noise: 30,
    seed: 0xA5,
};

/// Central frequency-bin pair at the constructive phase, 700 ps window.
pub const FREQBIN_700PS: PeakFixture = PeakFixture {
    bin_width_ps: 20,
    window_ps: 700.0,
    fwhm_ps: 700.0,
    n_cc: 8_322,
    n_acc: 107,
    integration_s: 60.0,
    span_ps: 20_000,
    floor_noise: 2,
    seed: 0xB7,
};

/// Raw fringe contrast of the frequency-bin phase scan.
pub const FREQBIN_RAW_VISIBILITY: f64 = 0.901;
/// Phase points of the scan, `φ_m = kπ/16`.
pub const FREQBIN_SCAN_POINTS: usize = 8;

pub const RING2_FILE: &str = "ring2_867ps.csv";
pub const FREQBIN_FILE: &str = "freqbin_700ps.csv";
pub const FRINGE_FILE: &str = "freqbin_fringe.csv";
pub const TOMO_FILE: &str = "tomo_phi_plus.csv";

/// Count scale and sampling seed of the bundled |Φ⁺⟩ tomography data.
pub const TOMO_SCALE: f64 = 1e4;
pub const TOMO_SEED: u64 = 0xC3;

/// Poisson-sampled counts of the 36 projection settings on |Φ⁺⟩.
pub fn tomo_phi_plus() -> Vec<crate::tomography::ProjectionSetting> {
    use crate::tomography::{bell_phi_plus, synthesize_settings, DensityMatrix};
    let rho = DensityMatrix::pure(&bell_phi_plus()).expect("unit state");
    synthesize_settings(&rho, TOMO_SCALE, Some(TOMO_SEED), 60.0).expect("valid scale")
}

impl PeakFixture {
    /// Bin count of one analysis window.
    pub fn window_bins(&self) -> usize {
        (self.window_ps / self.bin_width_ps as f64).round() as usize
    }

    pub fn build(&self) -> CoincidenceHistogram {
        let m = self.window_bins() as i64;
        let half = m / 2;
        let w = self.bin_width_ps;
        // peak on the centre of bin -1, bins symmetric around it
        let k0 = -1i64;
        let lo = (-self.span_ps).div_euclid(w);
        let hi = 2 * k0 - lo;

        // floor: one symmetric period summing to n_acc
        let mut rng = substream(self.seed, Domain::Cell, 0, 0);
        let base = self.n_acc as i64 / m;
        let mut period = vec![0i64; m as usize];
        for j in 1..=half {
            let v = base + rng.random_range(-self.floor_noise / 2..=self.floor_noise / 2);
            period[j as usize] = v;
            period[(m - j) as usize] = v;
        }
        // pull the centre bin back near `base` by nudging symmetric pairs
        let mut j = 1usize;
        loop {
            period[0] = self.n_acc as i64 - period[1..].iter().sum::<i64>();
            let step = match period[0] - base {
                d if d > 1 => 1,
                d if d < -1 => -1,
                _ => break,
            };
            period[j] += step;
            period[m as usize - j] += step;
            j = j % half as usize + 1;
        }

        // excess: Gaussian on bin centres, centre bin absorbs the rounding
        let sigma = self.fwhm_ps / FWHM_PER_SIGMA;
        let target = self.n_cc - self.n_acc;
        let inside = (self.window_ps / (2.0 * 2f64.sqrt() * sigma)).min(40.0);
        let area = target as f64 / statrs::function::erf::erf(inside);
        let amp = area * w as f64 / (sigma * (2.0 * PI).sqrt());
        let excess = |j: i64| (amp * (-0.5 * (j as f64 * w as f64 / sigma).powi(2)).exp()).round() as i64;
        let side: i64 = (1..=half).map(|j| 2 * excess(j)).sum();
        let center = target as i64 - side;

        let counts = (lo..=hi)
            .map(|k| {
                let j = k - k0;
                let e = if j == 0 { center } else { excess(j.abs()) };
                (period[j.rem_euclid(m) as usize] + e) as u64
            })
            .collect();
        CoincidenceHistogram::from_counts(w, lo, counts, self.integration_s).expect("positive bin width")
    }
}

/// `(φ_m, counts)` of the frequency-bin phase scan. Counts follow
/// `C₀(1 + V cos 4φ_m)` with the constructive point equal to the 700 ps
/// fixture's coincidence count.
pub fn freqbin_fringe() -> Vec<(f64, u64)> {
    let c0 = FREQBIN_700PS.n_cc as f64 / (1.0 + FREQBIN_RAW_VISIBILITY);
    (0..FREQBIN_SCAN_POINTS)
        .map(|k| {
            let phi = k as f64 * PI / 16.0;
            (phi, (c0 * (1.0 + FREQBIN_RAW_VISIBILITY * (4.0 * phi).cos())).round() as u64)
        })
        .collect()
}

pub fn write_fringe_csv<W: std::io::Write>(scan: &[(f64, u64)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "phi_m_rad,counts")?;
    for (phi, c) in scan {
        writeln!(w, "{phi:.17e},{c}")?;
    }
    Ok(())
}

pub fn read_fringe_csv<R: std::io::BufRead>(r: R) -> Result<Vec<(f64, u64)>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with("phi") {
            continue;
        }
        let mut it = t.split(',');
        let bad = || crate::Error::Format(format!("line {}: expected `phi_m_rad,counts`", n + 1));
        let phi = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let c = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        out.push((phi, c));
    }
    Ok(out)
}

/// Writes every bundled fixture into `dir`.
pub fn write_all(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, fx) in [(RING2_FILE, RING2_PEAK), (FREQBIN_FILE, FREQBIN_700PS)] {
        let f = std::fs::File::create(dir.join(name))?;
        fx.build().write_csv(std::io::BufWriter::new(f))?;
    }
    let f = std::fs::File::create(dir.join(FRINGE_FILE))?;
    write_fringe_csv(&freqbin_fringe(), std::io::BufWriter::new(f))?;
    let f = std::fs::File::create(dir.join(TOMO_FILE))?;
    crate::tomography::write_settings_csv(&tomo_phi_plus(), std::io::BufWriter::new(f))?;
    Ok(())
}

/// Directory holding the bundled fixture files.
pub fn bundled_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}
