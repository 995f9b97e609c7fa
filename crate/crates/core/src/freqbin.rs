//! Frequency-bin qubits: two-ring state preparation, the mixing modulator,
//! fringes versus modulation phase and joint-spectral-intensity scans.
//!
//! Each photon lives in one of two frequency bins spaced `2·f_m` apart.
//! A modulator driven at `f_m` moves amplitude by integer multiples of
//! `f_m`, so both bins feed the midpoint with sidebands `∓1`. Output
//! frequencies are tracked as integer offsets from the midpoint in units
//! of `f_m`.

use std::collections::BTreeMap;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coincidence::{histogram, metrics_at, AccidentalPolicy};
use crate::eo_comb::ModulatorSettings;
use crate::error::{domain, Error, Result};
use crate::model::{pair_rate, ResonatorSpec};
use crate::rng::{child_seed, Domain};
use crate::synth::{run_plan, DarkSource, EmissionPlan, PairSource, Routing, SynthScenario, CH_IDLER, CH_SIGNAL};
use crate::tags::TagStream;

const NORM_TOL: f64 = 1e-12;

/// Two-qubit state over `|00⟩, |01⟩, |10⟩, |11⟩` (signal qubit first).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinState {
    amps: [Complex64; 4],
}

impl BinState {
    /// Normalises `amps`; an all-zero vector is a domain error.
    pub fn new(amps: [Complex64; 4]) -> Result<Self> {
        let n2: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        if !(n2 > 0.0) || !n2.is_finite() {
            return domain("state has zero total amplitude");
        }
        let s = 1.0 / n2.sqrt();
        Ok(Self { amps: amps.map(|a| a * s) })
    }

    /// `(|00⟩ + r·e^{iθ}|11⟩)/√(1 + r²)`.
    pub fn from_amplitude_ratio(r: f64, theta: f64) -> Result<Self> {
        if !(r >= 0.0) || !r.is_finite() {
            return domain(format!("amplitude ratio must be finite and >= 0, got {r}"));
        }
        let z = Complex64::new(0.0, 0.0);
        Self::new([Complex64::new(1.0, 0.0), z, z, Complex64::from_polar(r, theta)])
    }

    pub fn phi_plus() -> Self {
        Self::from_amplitude_ratio(1.0, 0.0).expect("valid")
    }

    pub fn amps(&self) -> &[Complex64; 4] {
        &self.amps
    }

    /// `amp(a, b)` for signal bin `a` and idler bin `b`.
    pub fn amp(&self, a: usize, b: usize) -> Complex64 {
        self.amps[2 * a + b]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm_sqr() - 1.0).abs() < NORM_TOL
    }
}

/// State produced by pumping `ring_a` (bin 0 of both photons) and `ring_b`
/// (bin 1) with on-chip powers `p_a_mw`, `p_b_mw` and relative pump phase
/// `theta`. Amplitudes scale as the square root of each ring's pair rate.
pub fn two_ring_state(ring_a: &ResonatorSpec, ring_b: &ResonatorSpec, p_a_mw: f64, p_b_mw: f64, theta: f64) -> Result<BinState> {
    let ra = pair_rate(ring_a, p_a_mw)?;
    let rb = pair_rate(ring_b, p_b_mw)?;
    let z = Complex64::new(0.0, 0.0);
    BinState::new([Complex64::new(ra.sqrt(), 0.0), z, z, Complex64::from_polar(rb.sqrt(), theta)])
}

/// Power ratio `P_b/P_a` that equalises the pair rates of two rings.
pub fn balanced_pump_ratio(ring_a: &ResonatorSpec, ring_b: &ResonatorSpec) -> f64 {
    (ring_a.pairgen_ghz_per_mw2() / ring_b.pairgen_ghz_per_mw2()).sqrt()
}

/// Absolute bin frequencies: `[bin 0, bin 1]` for each photon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqBinLayout {
    pub signal_ghz: [f64; 2],
    pub idler_ghz: [f64; 2],
}

impl FreqBinLayout {
    /// Bin 0 at `mid + f_m` and bin 1 at `mid − f_m` for both photons.
    pub fn symmetric(signal_mid_ghz: f64, idler_mid_ghz: f64, mod_freq_ghz: f64) -> Self {
        Self {
            signal_ghz: [signal_mid_ghz + mod_freq_ghz, signal_mid_ghz - mod_freq_ghz],
            idler_ghz: [idler_mid_ghz + mod_freq_ghz, idler_mid_ghz - mod_freq_ghz],
        }
    }

    /// Bins taken from the signal and idler resonances of two rings.
    pub fn from_rings(ring_a: &ResonatorSpec, ring_b: &ResonatorSpec) -> Self {
        Self {
            signal_ghz: [ring_a.signal_ghz(), ring_b.signal_ghz()],
            idler_ghz: [ring_a.idler_ghz(), ring_b.idler_ghz()],
        }
    }

    pub fn signal_mid_ghz(&self) -> f64 {
        0.5 * (self.signal_ghz[0] + self.signal_ghz[1])
    }
    pub fn idler_mid_ghz(&self) -> f64 {
        0.5 * (self.idler_ghz[0] + self.idler_ghz[1])
    }

    /// Bin offsets from the midpoints in units of `f_m`; both bins must sit
    /// exactly one sideband from the midpoint.
    fn offsets(&self, f_m: f64) -> Result<([i32; 2], [i32; 2])> {
        let conv = |bins: [f64; 2], mid: f64, name: &str| -> Result<[i32; 2]> {
            let mut out = [0; 2];
            for (o, f) in out.iter_mut().zip(bins) {
                let x = (f - mid) / f_m;
                if (x.abs() - 1.0).abs() > 1e-6 {
                    return Err(Error::Config(format!(
                        "{name} bins {:?} GHz are not spaced 2·f_m = {} GHz apart",
                        bins,
                        2.0 * f_m
                    )));
                }
                *o = x.round() as i32;
            }
            Ok(out)
        };
        Ok((conv(self.signal_ghz, self.signal_mid_ghz(), "signal")?, conv(self.idler_ghz, self.idler_mid_ghz(), "idler")?))
    }
}

/// Programmable filter: unit power transmission inside a passband, the
/// extinction outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterBank {
    pub centers_ghz: Vec<f64>,
    pub bandwidth_ghz: f64,
    /// `f64::INFINITY` blocks everything out of band.
    pub extinction_db: f64,
}

impl FilterBank {
    pub fn new(centers_ghz: Vec<f64>, bandwidth_ghz: f64, extinction_db: f64) -> Result<Self> {
        let f = Self { centers_ghz, bandwidth_ghz, extinction_db };
        f.validate()?;
        Ok(f)
    }

    /// Filters on the two midpoints of `layout`.
    pub fn central(layout: &FreqBinLayout, bandwidth_ghz: f64, extinction_db: f64) -> Result<Self> {
        Self::new(vec![layout.signal_mid_ghz(), layout.idler_mid_ghz()], bandwidth_ghz, extinction_db)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extinction_db >= 0.0) {
            return Err(Error::Config(format!("extinction_db: must be >= 0, got {}", self.extinction_db)));
        }
        if !(self.bandwidth_ghz > 0.0) {
            return Err(Error::Config(format!("bandwidth_ghz: must be > 0, got {}", self.bandwidth_ghz)));
        }
        Ok(())
    }

    /// Out-of-band power transmission `10^(−ext/10)`.
    pub fn leakage(&self) -> f64 {
        if self.extinction_db.is_infinite() {
            0.0
        } else {
            10f64.powf(-self.extinction_db / 10.0)
        }
    }

    /// Transmission at `freq_ghz` of the passband centred on `center_ghz`.
    pub fn transmission(&self, center_ghz: f64, freq_ghz: f64) -> f64 {
        if (freq_ghz - center_ghz).abs() <= 0.5 * self.bandwidth_ghz {
            1.0
        } else {
            self.leakage()
        }
    }

    /// Passband centre nearest `freq_ghz`, if `freq_ghz` lies inside it.
    fn passband_at(&self, freq_ghz: f64) -> Option<f64> {
        self.centers_ghz
            .iter()
            .copied()
            .filter(|c| (c - freq_ghz).abs() <= 0.5 * self.bandwidth_ghz)
            .min_by(|a, b| (a - freq_ghz).abs().total_cmp(&(b - freq_ghz).abs()))
    }
}

/// Detection probabilities per photon pair behind the central filters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixOutcome {
    pub p_coincidence: f64,
    pub p_signal: f64,
    pub p_idler: f64,
}

/// Joint output amplitudes `A(k_s, k_i)` over midpoint offsets, computed as
/// `Uᵀ α U` with `U[a][k] = c_{k − x_a}`.
pub fn output_amplitudes(state: &BinState, settings: &ModulatorSettings, layout: &FreqBinLayout) -> Result<JointAmplitudes> {
    settings.validate()?;
    let (xs, xi) = layout.offsets(settings.mod_freq_ghz)?;
    let n = settings.max_order as i32;
    let coeffs = settings.coefficients();
    let c = |k: i32| -> Complex64 {
        if k.abs() > n {
            Complex64::new(0.0, 0.0)
        } else {
            coeffs[(k + n) as usize]
        }
    };
    let kmax = n + 1;
    let dim = (2 * kmax + 1) as usize;
    let u_s: Vec<[Complex64; 2]> = (-kmax..=kmax).map(|k| [c(k - xs[0]), c(k - xs[1])]).collect();
    let u_i: Vec<[Complex64; 2]> = (-kmax..=kmax).map(|k| [c(k - xi[0]), c(k - xi[1])]).collect();
    let mut amps = vec![Complex64::new(0.0, 0.0); dim * dim];
    for (p, us) in u_s.iter().enumerate() {
        for (q, ui) in u_i.iter().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..2 {
                for b in 0..2 {
                    acc += state.amp(a, b) * us[a] * ui[b];
                }
            }
            amps[p * dim + q] = acc;
        }
    }
    Ok(JointAmplitudes { kmax, amps, mod_freq_ghz: settings.mod_freq_ghz, signal_mid_ghz: layout.signal_mid_ghz(), idler_mid_ghz: layout.idler_mid_ghz() })
}

/// Output amplitudes on the `(2K+1)²` grid of offsets `−K..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAmplitudes {
    pub kmax: i32,
    amps: Vec<Complex64>,
    pub mod_freq_ghz: f64,
    pub signal_mid_ghz: f64,
    pub idler_mid_ghz: f64,
}

impl JointAmplitudes {
    pub fn get(&self, k_s: i32, k_i: i32) -> Complex64 {
        if k_s.abs() > self.kmax || k_i.abs() > self.kmax {
            return Complex64::new(0.0, 0.0);
        }
        let dim = (2 * self.kmax + 1) as usize;
        self.amps[(k_s + self.kmax) as usize * dim + (k_i + self.kmax) as usize]
    }

    pub fn offsets(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        let k = self.kmax;
        (-k..=k).flat_map(move |a| (-k..=k).map(move |b| (a, b)))
    }

    /// Total output probability (one minus the truncated tail).
    pub fn total(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }
}

fn central_passbands(filters: &FilterBank, layout: &FreqBinLayout, f_m: f64) -> Result<(f64, f64)> {
    filters.validate()?;
    if filters.bandwidth_ghz >= f_m {
        return Err(Error::Config(format!(
            "filter bandwidth {} GHz covers more than one bin at spacing {f_m} GHz",
            filters.bandwidth_ghz
        )));
    }
    let find = |mid: f64, name: &str| {
        filters
            .passband_at(mid)
            .ok_or_else(|| Error::Config(format!("no filter passband at the {name} midpoint {mid} GHz")))
    };
    Ok((find(layout.signal_mid_ghz(), "signal")?, find(layout.idler_mid_ghz(), "idler")?))
}

/// Mixes both photons in the modulator and projects them on the central
/// filter passbands. Different output frequencies are distinguishable and
/// add in probability.
pub fn mix_and_project(state: &BinState, settings: &ModulatorSettings, filters: &FilterBank, layout: &FreqBinLayout) -> Result<MixOutcome> {
    let (cs, ci) = central_passbands(filters, layout, settings.mod_freq_ghz)?;
    let amps = output_amplitudes(state, settings, layout)?;
    let f_m = settings.mod_freq_ghz;
    let mut out = MixOutcome { p_coincidence: 0.0, p_signal: 0.0, p_idler: 0.0 };
    for (ks, ki) in amps.offsets() {
        let p = amps.get(ks, ki).norm_sqr();
        if p == 0.0 {
            continue;
        }
        let ts = filters.transmission(cs, amps.signal_mid_ghz + ks as f64 * f_m);
        let ti = filters.transmission(ci, amps.idler_mid_ghz + ki as f64 * f_m);
        out.p_coincidence += ts * ti * p;
        out.p_signal += ts * p;
        out.p_idler += ti * p;
    }
    Ok(out)
}

/// `(φ_m, p_coincidence)` over the given modulation phases.
pub fn fringe_scan(
    state: &BinState,
    settings: &ModulatorSettings,
    filters: &FilterBank,
    layout: &FreqBinLayout,
    phases: &[f64],
) -> Result<Vec<(f64, f64)>> {
    phases
        .iter()
        .map(|&phi| Ok((phi, mix_and_project(state, &settings.with_phase(phi), filters, layout)?.p_coincidence)))
        .collect()
}

pub fn write_fringe_csv<W: Write>(scan: &[(f64, f64)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "phi_m_rad,prob")?;
    for (phi, p) in scan {
        writeln!(w, "{phi},{p}")?;
    }
    Ok(())
}

/// Time tags of the two-ring source behind the mixing modulator at the
/// phase in `scenario.mixing`. Rings 0 and 1 of the array prepare bins 0
/// and 1; every pair is routed with the probabilities of
/// [`mix_and_project`].
pub fn synthesize_freqbin(scenario: &SynthScenario, theta: f64, filters: &FilterBank) -> Result<TagStream> {
    scenario.validate()?;
    let settings = scenario
        .mixing
        .ok_or_else(|| Error::Domain("scenario has no modulator settings".into()))?;
    let rings = scenario.array.resonators();
    if rings.len() != 2 {
        return domain(format!("frequency-bin source needs exactly two rings, got {}", rings.len()));
    }
    let state = two_ring_state(&rings[0], &rings[1], scenario.pump_power_mw[0], scenario.pump_power_mw[1], theta)?;
    let layout = FreqBinLayout::from_rings(&rings[0], &rings[1]);
    let mix = mix_and_project(&state, &settings, filters, &layout)?;
    let rate: f64 = scenario.pair_rates_hz()?.iter().sum();
    let ch = scenario.array.channels();
    let plan = EmissionPlan {
        sources: vec![PairSource {
            rate_hz: rate,
            eta_signal: ch.efficiency_signal,
            eta_idler: ch.efficiency_idler,
            routing: Routing::Filtered {
                signal: CH_SIGNAL,
                idler: CH_IDLER,
                p_both: mix.p_coincidence,
                p_signal_only: (mix.p_signal - mix.p_coincidence).max(0.0),
                p_idler_only: (mix.p_idler - mix.p_coincidence).max(0.0),
            },
        }],
        darks: vec![
            DarkSource { channel: CH_SIGNAL, rate_hz: ch.dark_rate_signal_hz },
            DarkSource { channel: CH_IDLER, rate_hz: ch.dark_rate_idler_hz },
        ],
        channel_count: 2,
        duration_s: scenario.duration_s,
        jitter_fwhm_ps: scenario.jitter_fwhm_ps,
        resolution_ps: scenario.resolution_ps,
        dead_time_ps: scenario.dead_time_ps,
        seed: scenario.seed,
    };
    let mut out = run_plan(&plan)?;
    out.metadata = scenario.digest();
    Ok(out)
}

/// Windowed coincidence counts of a JSI scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JsiMatrix {
    pub n: usize,
    /// Row = signal bin, column = idler bin.
    pub n_cc: Vec<Vec<u64>>,
    pub n_acc: Vec<Vec<f64>>,
    pub grid_spacing_ghz: f64,
    pub extinction_db: f64,
    pub window_ps: f64,
}

impl JsiMatrix {
    /// Accidental-subtracted counts.
    pub fn net(&self, i: usize, j: usize) -> f64 {
        self.n_cc[i][j] as f64 - self.n_acc[i][j]
    }

    /// Poisson error of [`net`](Self::net) with `windows` accidental windows.
    pub fn net_sigma(&self, i: usize, j: usize, windows: usize) -> f64 {
        (self.n_cc[i][j] as f64 + self.n_acc[i][j] / windows as f64).sqrt()
    }

    /// Mean off-diagonal over mean diagonal net counts, with its error.
    pub fn off_on_ratio(&self, windows: usize) -> (f64, f64) {
        let (mut on, mut on_var, mut off, mut off_var) = (0.0, 0.0, 0.0, 0.0);
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                let (v, s) = (self.net(i, j), self.net_sigma(i, j, windows));
                if i == j {
                    on += v;
                    on_var += s * s;
                } else {
                    off += v;
                    off_var += s * s;
                }
            }
        }
        let (n_on, n_off) = (n as f64, (n * n - n) as f64);
        let (on, off) = (on / n_on, off / n_off);
        let (on_s, off_s) = (on_var.sqrt() / n_on, off_var.sqrt() / n_off);
        let r = off / on;
        (r, r.abs() * ((off_s / off).powi(2) + (on_s / on).powi(2)).sqrt())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in &self.n_cc {
            let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Expected off- to on-diagonal ratio for `n` aligned, equally bright rings
/// behind filters with power leakage `eps`.
pub fn expected_off_on_ratio(n: usize, eps: f64) -> f64 {
    let n = n as f64;
    (2.0 * eps + (n - 2.0) * eps * eps) / (1.0 + (n - 1.0) * eps * eps)
}

/// Pair rate of each ring when pumped from a comb line, scaled by the
/// intracavity build-up `1/(1 + (2δ/Δν)²)` at the ring's detuning δ.
pub fn comb_pumped_rates(scenario: &SynthScenario) -> Result<Vec<f64>> {
    scenario
        .array
        .resonators()
        .iter()
        .zip(&scenario.pump_power_mw)
        .map(|(r, p)| {
            let x = 2.0 * r.detuning_ghz() / r.linewidth_ghz();
            pair_rate(r, p / (1.0 + x * x))
        })
        .collect()
}

/// Filtered coincidences for every `(signal bin, idler bin)` pair. Ring
/// `k` of the array emits into signal bin `k` and idler bin `k`; a filter
/// set to bin `i` passes bin `i` fully and leaks every other bin at the
/// extinction. Photons from different rings only meet as accidentals.
pub fn jsi_scan(scenario: &SynthScenario, filters: &FilterBank, window_ps: f64) -> Result<JsiMatrix> {
    scenario.validate()?;
    filters.validate()?;
    let n = scenario.array.len();
    let spacing = grid_spacing(filters, n)?;
    let rates = comb_pumped_rates(scenario)?;
    let eps = filters.leakage();
    let ch = scenario.array.channels();
    let policy = AccidentalPolicy::default();
    let span = (window_ps * (5.0 + 12.0)).ceil() as i64;
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let results = cells
        .par_iter()
        .map(|&(i, j)| -> Result<(u64, f64)> {
            let sources = rates
                .iter()
                .enumerate()
                .filter(|(_, r)| **r > 0.0)
                .map(|(k, &rate_hz)| {
                    let ts = if k == i { 1.0 } else { eps };
                    let ti = if k == j { 1.0 } else { eps };
                    PairSource {
                        rate_hz,
                        eta_signal: ch.efficiency_signal,
                        eta_idler: ch.efficiency_idler,
                        routing: Routing::Filtered {
                            signal: CH_SIGNAL,
                            idler: CH_IDLER,
                            p_both: ts * ti,
                            p_signal_only: ts * (1.0 - ti),
                            p_idler_only: (1.0 - ts) * ti,
                        },
                    }
                })
                .collect();
            let plan = EmissionPlan {
                sources,
                darks: vec![
                    DarkSource { channel: CH_SIGNAL, rate_hz: ch.dark_rate_signal_hz },
                    DarkSource { channel: CH_IDLER, rate_hz: ch.dark_rate_idler_hz },
                ],
                channel_count: 2,
                duration_s: scenario.duration_s,
                jitter_fwhm_ps: scenario.jitter_fwhm_ps,
                resolution_ps: scenario.resolution_ps,
                dead_time_ps: scenario.dead_time_ps,
                seed: child_seed(scenario.seed, Domain::Cell, (i * n + j) as u64),
            };
            let stream = run_plan(&plan)?;
            let bin = (scenario.resolution_ps as i64).max(10);
            let hist = histogram(&stream, CH_SIGNAL, CH_IDLER, bin, span)?;
            let m = metrics_at(&hist, 0.0, scenario.jitter_fwhm_ps, window_ps, 1.0, 1.0, &policy)?;
            Ok((m.n_cc, m.n_acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut n_cc = vec![vec![0; n]; n];
    let mut n_acc = vec![vec![0.0; n]; n];
    for (&(i, j), (c, a)) in cells.iter().zip(results) {
        n_cc[i][j] = c;
        n_acc[i][j] = a;
    }
    Ok(JsiMatrix { n, n_cc, n_acc, grid_spacing_ghz: spacing, extinction_db: filters.extinction_db, window_ps })
}

/// Uniform passband spacing of a JSI filter grid with one centre per ring.
fn grid_spacing(filters: &FilterBank, n: usize) -> Result<f64> {
    let c = &filters.centers_ghz;
    if c.len() != n {
        return Err(Error::Config(format!("filter grid has {} passbands for {n} rings", c.len())));
    }
    if n == 1 {
        return Ok(f64::INFINITY);
    }
    let step = c[1] - c[0];
    if c.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-6 * step.abs()) {
        return Err(Error::Config("filter passbands must be evenly spaced".into()));
    }
    if filters.bandwidth_ghz >= step.abs() {
        return Err(Error::Config(format!(
            "filter bandwidth {} GHz covers more than one bin at spacing {} GHz",
            filters.bandwidth_ghz,
            step.abs()
        )));
    }
    Ok(step.abs())
}

/// Sparse reference: every `(n_s, n_i)` sideband path of every basis term,
/// accumulated by output frequency. Used to check the matrix route.
pub fn enumerate_paths(state: &BinState, settings: &ModulatorSettings, layout: &FreqBinLayout) -> Result<BTreeMap<(i32, i32), Complex64>> {
    settings.validate()?;
    let (xs, xi) = layout.offsets(settings.mod_freq_ghz)?;
    let n = settings.max_order as i32;
    let mut out: BTreeMap<(i32, i32), Complex64> = BTreeMap::new();
    for a in 0..2 {
        for b in 0..2 {
            let amp = state.amp(a, b);
            if amp.norm_sqr() == 0.0 {
                continue;
            }
            for ns in -n..=n {
                for ni in -n..=n {
                    *out.entry((xs[a] + ns, xi[b] + ni)).or_default() += amp * settings.coefficient(ns) * settings.coefficient(ni);
                }
            }
        }
    }
    Ok(out)
}
