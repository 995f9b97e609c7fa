//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on
//! any failure. Run with `cargo test -p qcomb-core --test acceptance`.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qcomb_core::coincidence::{fit_gaussian, histogram, metrics, CoincidenceHistogram};
use qcomb_core::entanglement::{fit_visibility, g2_heralded, FransonOptions, FringeScan, CHSH_VISIBILITY};
use qcomb_core::eo_comb::{bessel_j, modulate, FIRST_ORDER_OPTIMAL_DEPTH};
use qcomb_core::fixtures;
use qcomb_core::freqbin::{
    enumerate_paths, expected_off_on_ratio, jsi_scan, mix_and_project, output_amplitudes, BinState, FilterBank, FreqBinLayout,
};
use qcomb_core::model::{ArrayConfig, ChannelModel, ResonatorSpec};
use qcomb_core::pipeline::{franson_pipeline, phase_grid, power_sweep};
use qcomb_core::report::to_json;
use qcomb_core::stats::log_grid;
use qcomb_core::synth::{synthesize, synthesize_hbt, FransonSettings, SynthScenario};
use qcomb_core::tomography::{
    bell_phi_plus, fidelity, mle_reconstruct, random_bures, synthesize_settings, trace_distance, DensityMatrix, MleOptions,
    Reconstruction,
};
use qcomb_core::{Error, ModulatorSettings, PairMetrics};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn load_hist(name: &str) -> Result<CoincidenceHistogram, String> {
    let f = std::fs::File::open(fixtures::bundled_dir().join(name)).map_err(e)?;
    CoincidenceHistogram::read_csv(std::io::BufReader::new(f)).map_err(e)
}

fn analyse(hist: &CoincidenceHistogram, window: f64) -> Result<PairMetrics, String> {
    let fit = fit_gaussian(hist).map_err(e)?;
    metrics(hist, &fit, window, 1.0, 1.0).map_err(e)
}

fn c1_fixtures() -> Outcome {
    let a = analyse(&load_hist(fixtures::RING2_FILE)?, 867.0)?;
    let f = analyse(&load_hist(fixtures::FREQBIN_FILE)?, 700.0)?;
    let file = std::fs::File::open(fixtures::bundled_dir().join(fixtures::FRINGE_FILE)).map_err(e)?;
    let fringe = fixtures::read_fringe_csv(std::io::BufReader::new(file)).map_err(e)?;
    // the eight points cover φ_m ∈ [0, 7π/16]; in units of 4φ_m they span a full period
    let folded: Vec<(f64, u64)> = fringe.iter().map(|(p, c)| (4.0 * p, *c)).collect();
    let v = fit_visibility(&FringeScan::from_counts(&folded).map_err(e)?, 0.0).map_err(e)?;
    let ok = a.n_cc == 446_856
        && a.n_acc == 12_090.0
        && (a.car - 36.0).abs() <= 0.3
        && (f.r_detected_hz - 138.7).abs() < 0.05
        && (f.car - 76.8).abs() < 0.05
        && (v.v_raw - 0.901).abs() < 0.0005;
    check(
        ok,
        format!(
            "N_cc={} N_acc={} CAR={:.2}±{:.2}; 700 ps: rate={:.1} Hz CAR={:.1} V_raw={:.1}%",
            a.n_cc,
            a.n_acc,
            a.car,
            a.car_sigma,
            f.r_detected_hz,
            f.car,
            100.0 * v.v_raw
        ),
    )
}

fn ring2_array(dark_hz: f64) -> ArrayConfig {
    let mut ch = ChannelModel::from_losses(13.5, 12.5, 0.85, false);
    ch.dark_rate_signal_hz = dark_hz;
    ch.dark_rate_idler_hz = dark_hz;
    ArrayConfig::new(vec![ResonatorSpec::from_device_table(2).unwrap()], ch).unwrap()
}

fn c2_scaling() -> Outcome {
    let base = SynthScenario::new(ring2_array(100.0), vec![0.0], 2.0, 0x5EED);
    let powers = log_grid(0.001, 0.1, 8);
    let s = power_sweep(&base, &powers, None, 17).map_err(e)?;
    let top = s.rows.last().unwrap();
    let (kc, ka) = (s.coincidence_law.exponent, s.accidental_law.exponent);
    let ok = top.n_cc >= 10_000 && (kc - 2.0).abs() <= 0.15 && (ka - 4.0).abs() <= 0.3 && (s.car_rate_slope + 1.0).abs() <= 0.1;
    check(
        ok,
        format!(
            "N_cc(top)={} exponents {:.3}±{:.3} / {:.3}±{:.3}; CAR-rate slope {:.3}±{:.3}",
            top.n_cc,
            kc,
            s.coincidence_law.exponent_sigma,
            ka,
            s.accidental_law.exponent_sigma,
            s.car_rate_slope,
            s.car_rate_slope_sigma
        ),
    )
}

/// `c_n = (1/N) Σ_k exp(iβ cos(2πk/N + φ)) e^{−2πink/N}`, trapezoid rule
/// over one RF period.
fn fourier_coefficient(beta: f64, phi: f64, n: i32) -> Complex64 {
    let m = 4096;
    let mut acc = Complex64::new(0.0, 0.0);
    for k in 0..m {
        let t = 2.0 * PI * k as f64 / m as f64;
        acc += Complex64::from_polar(1.0, beta * (t + phi).cos() - n as f64 * t);
    }
    acc / m as f64
}

fn c3_sidebands() -> Outcome {
    let mut worst = 0.0f64;
    for beta in [0.5, 1.0, 1.841, 3.0] {
        for phi in [0.0, PI / 7.0, PI / 2.0] {
            let s = ModulatorSettings::new(25.0, beta, phi).map_err(e)?.with_max_order(16).map_err(e)?;
            let comb = modulate(193_000.0, &s).map_err(e)?;
            for n in -5..=5 {
                let got = comb.line(n).ok_or_else(|| format!("missing order {n}"))?.amp;
                worst = worst.max((got - fourier_coefficient(beta, phi, n)).norm());
            }
        }
    }
    check(worst < 1e-9, format!("max |Δc_n| = {worst:.2e}"))
}

fn franson_base(v: f64) -> SynthScenario {
    let ch = ChannelModel { efficiency_signal: 0.1, efficiency_idler: 0.1, dark_rate_signal_hz: 1000.0, dark_rate_idler_hz: 1000.0, ..ChannelModel::ideal() };
    let array = ArrayConfig::new(vec![ResonatorSpec::from_device_table(2).unwrap()], ch).unwrap();
    // 1.01 GHz/mW² × (0.1 mW)² ≈ 10 MHz: accidentals a few percent of the fringe mean
    let mut s = SynthScenario::new(array, vec![0.1], 0.2, 0xF5 + (v * 100.0) as u64);
    s.franson = Some(FransonSettings { delay_ns: 16.0, phase_rad: 0.0, visibility: v });
    s
}

fn c4_franson() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for v in [0.7, 0.9, 0.95] {
        let (scan, fit) = franson_pipeline(&franson_base(v), &phase_grid(8), &FransonOptions::new(867.0)).map_err(e)?;
        let central: u64 = scan.central_counts().iter().sum();
        let good = (fit.v_corr - v).abs() <= 0.02 && fit.chsh_violated == (v > CHSH_VISIBILITY) && central >= 10_000;
        ok &= good;
        parts.push(format!(
            "V={v}: v_raw={:.3} v_corr={:.3}±{:.3} chsh={}",
            fit.v_raw, fit.v_corr, fit.v_corr_sigma, fit.chsh_violated
        ));
    }
    check(ok, parts.join("; "))
}

fn c5_g2() -> Outcome {
    let ch = ChannelModel { efficiency_signal: 0.5, efficiency_idler: 0.5, ..ChannelModel::ideal() };
    let array = ArrayConfig::new(vec![ResonatorSpec::from_device_table(1).unwrap()], ch).unwrap();
    let fwhm = 867.0;
    let grid: Vec<f64> = (-40..=40).map(|k| k as f64 * 1000.0).collect();
    let mut g0 = Vec::new();
    let mut tail = (0.0, 0.0);
    for (k, p) in [0.03, 0.06, 0.12].into_iter().enumerate() {
        let stream = synthesize_hbt(&SynthScenario::new(array.clone(), vec![p], 2.0, 0x62 + k as u64)).map_err(e)?;
        let c = g2_heralded(&stream, (0, 1, 2), fwhm, &grid).map_err(e)?;
        g0.push(c.at_zero().ok_or("no τ = 0 point")?.g2);
        tail = c.tail(10.0 * fwhm).ok_or("no tail points")?;
    }
    let ok = g0[0] < 0.02 && g0.windows(2).all(|w| w[1] > w[0]) && (tail.0 - 1.0).abs() <= 0.05;
    check(ok, format!("g2(0) = {:.4} / {:.4} / {:.4}; tail {:.4}±{:.4}", g0[0], g0[1], g0[2], tail.0, tail.1))
}

/// Golden-section search for the extremum of `f` on `[a, b]`.
fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, maximize: bool) -> f64 {
    let g = |x: f64| if maximize { -f(x) } else { f(x) };
    let r = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        let (c, d) = (b - r * (b - a), a + r * (b - a));
        if g(c) < g(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

fn c6_freqbin() -> Outcome {
    let fm = 12.5;
    let layout = FreqBinLayout::symmetric(193_000.0, 191_300.0, fm);
    let filters = FilterBank::central(&layout, 5.0, f64::INFINITY).map_err(e)?;
    let settings = ModulatorSettings::new(fm, FIRST_ORDER_OPTIMAL_DEPTH, 0.0).map_err(e)?;
    let phi = BinState::phi_plus();
    let p = |x: f64| mix_and_project(&phi, &settings.with_phase(x), &filters, &layout).unwrap().p_coincidence;
    let m0 = golden(p, -PI / 8.0, PI / 8.0, true);
    let m1 = golden(p, 3.0 * PI / 8.0, 5.0 * PI / 8.0, true);
    let lo = golden(p, PI / 8.0, 3.0 * PI / 8.0, false);
    let period = m1 - m0;
    let (pmax, pmin) = (p(m0), p(lo));
    let vis = (pmax - pmin) / (pmax + pmin);
    let j1 = bessel_j(1, FIRST_ORDER_OPTIMAL_DEPTH);
    let mut worst = 0.0f64;
    for x in [0.0, PI / 7.0, 0.3, PI / 2.0, 2.0] {
        let s = settings.with_phase(x);
        let m = output_amplitudes(&phi, &s, &layout).map_err(e)?;
        for ((ks, ki), amp) in enumerate_paths(&phi, &s, &layout).map_err(e)? {
            worst = worst.max((m.get(ks, ki) - amp).norm());
        }
        worst = worst.max((p(x) - j1.powi(4) * (1.0 + (4.0 * x).cos())).abs());
    }
    let ok = (period / (PI / 2.0) - 1.0).abs() < 0.01 && vis >= 1.0 - 1e-9 && worst < 1e-12;
    check(ok, format!("period {:.6}·π/2, visibility 1−{:.1e}, enumeration Δ {worst:.1e}", period / (PI / 2.0), 1.0 - vis))
}

fn c7_jsi() -> Outcome {
    let base = ResonatorSpec::from_device_table(3).unwrap();
    let rings: Vec<ResonatorSpec> = (0..5).map(|k| base.clone().with_id(k + 1)).collect();
    let ch = ChannelModel { efficiency_signal: 0.1, efficiency_idler: 0.1, ..ChannelModel::ideal() };
    let array = ArrayConfig::new(rings, ch).map_err(e)?;
    let scenario = SynthScenario::new(array, vec![0.016; 5], 1.0, 0x751);
    let filters = FilterBank::new((0..5).map(|k| 1000.0 + 12.5 * k as f64).collect(), 5.0, 20.0).map_err(e)?;
    let m = jsi_scan(&scenario, &filters, 867.0).map_err(e)?;
    let (r, sigma) = m.off_on_ratio(20);
    let expect = expected_off_on_ratio(5, 0.01);
    let diag_min = (0..5).map(|i| m.net(i, i)).fold(f64::INFINITY, f64::min);
    let off_max = (0..5).flat_map(|i| (0..5).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| m.net(i, j)).fold(f64::NEG_INFINITY, f64::max);
    let ok = diag_min > 10.0 * off_max && (r - expect).abs() <= 3.0 * sigma;
    check(ok, format!("off/on = {r:.5}±{sigma:.5} (expected {expect:.5}); min diagonal {diag_min:.0}, max off-diagonal {off_max:.0}"))
}

fn physical(rho: &DensityMatrix) -> bool {
    let m = rho.matrix();
    (m - m.adjoint()).iter().all(|z| z.norm() < 1e-12) && (m.trace().re - 1.0).abs() < 1e-9 && rho.eigenvalues().min() >= -1e-9
}

fn reconstruct(s: &[qcomb_core::tomography::ProjectionSetting], seed: u64) -> Result<Reconstruction, String> {
    match mle_reconstruct(s, &MleOptions { seed, ..MleOptions::default() }) {
        Ok(r) => Ok(r),
        Err(Error::NotConverged { best, .. }) => Ok(*best),
        Err(other) => Err(e(other)),
    }
}

fn c8_tomography() -> Outcome {
    let phi = bell_phi_plus();
    let target = DensityMatrix::pure(&phi).map_err(e)?;
    let mut good = 0;
    let mut all_physical = true;
    let mut worst_f = 1.0f64;
    for seed in 0..20 {
        let s = synthesize_settings(&target, 1e4, Some(1000 + seed), 1.0).map_err(e)?;
        let r = reconstruct(&s, seed)?;
        all_physical &= physical(&r.rho);
        let f = fidelity(&r.rho, &phi).map_err(e)?;
        worst_f = worst_f.min(f);
        good += usize::from(f >= 0.995);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0);
    let mut worst_d = 0.0f64;
    for k in 0..10 {
        let rho = random_bures(&mut rng);
        let s = synthesize_settings(&rho, 1e5, Some(2000 + k), 1.0).map_err(e)?;
        let r = reconstruct(&s, k)?;
        all_physical &= physical(&r.rho);
        worst_d = worst_d.max(trace_distance(&r.rho, &rho));
    }
    let ok = good >= 19 && worst_d < 0.02 && all_physical;
    check(ok, format!("{good}/20 runs with F ≥ 0.995 (min {worst_f:.4}); max trace distance {worst_d:.4}; physical: {all_physical}"))
}

/// Simulate + analyse + serialize, inside a pool of `threads` workers.
fn pipeline_bytes(threads: usize) -> Result<Vec<u8>, String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(e)?;
    pool.install(|| {
        let mut out = Vec::new();
        let s = SynthScenario::new(ring2_array(100.0), vec![0.0673], 1.0, 42);
        let stream = synthesize(&s).map_err(e)?;
        let hist = histogram(&stream, 0, 1, 17, 20_000).map_err(e)?;
        let fit = fit_gaussian(&hist).map_err(e)?;
        let ch = s.array.channels();
        let m = metrics(&hist, &fit, fit.fwhm_ps, ch.efficiency_signal, ch.efficiency_idler).map_err(e)?;
        out.extend(stream.digest().into_bytes());
        hist.write_csv(&mut out).map_err(e)?;
        out.extend(to_json(&m).map_err(e)?.into_bytes());
        let (_, v) = franson_pipeline(&franson_base(0.9), &phase_grid(6), &FransonOptions::new(867.0)).map_err(e)?;
        out.extend(to_json(&v).map_err(e)?.into_bytes());
        let t = synthesize_settings(&DensityMatrix::pure(&bell_phi_plus()).map_err(e)?, 1e4, Some(3), 1.0).map_err(e)?;
        out.extend(to_json(&reconstruct(&t, 3)?).map_err(e)?.into_bytes());
        Ok(out)
    })
}

fn c9_determinism() -> Outcome {
    let a = pipeline_bytes(1)?;
    let b = pipeline_bytes(4)?;
    let c = pipeline_bytes(4)?;
    check(a == b && b == c, format!("{} report bytes; 1 thread vs 4 threads identical: {}", a.len(), a == b && b == c))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("fixture arithmetic", c1_fixtures, Duration::from_secs(1)),
        ("scaling laws", c2_scaling, Duration::from_secs(120)),
        ("sideband oracle", c3_sidebands, Duration::from_secs(5)),
        ("Franson round trip", c4_franson, Duration::from_secs(120)),
        ("heralded g2", c5_g2, Duration::from_secs(180)),
        ("frequency-bin fringe", c6_freqbin, Duration::from_secs(5)),
        ("JSI structure", c7_jsi, Duration::from_secs(180)),
        ("tomography", c8_tomography, Duration::from_secs(120)),
        ("determinism", c9_determinism, Duration::from_secs(600)),
    ];
    let mut failed = 0;
    for (k, (name, run, budget)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = run();
        let dt = t0.elapsed();
        let (status, detail) = match outcome {
            Ok(d) if dt <= *budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d} (over the {:?} budget)", budget)),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} {} {name}: {detail} [{:.2} s]", k + 1, dt.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
