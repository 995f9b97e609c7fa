//! Monte Carlo synthesis of time-tagged detection streams.
//!
//! Each ring emits pairs as a homogeneous Poisson process. Photons are
//! thinned independently by the channel efficiencies, jittered by a
//! Gaussian and merged with Poisson dark counts. Accidental coincidences
//! are never injected; they come from distinct pairs and dark counts.
//!
//! Work is cut into fixed time shards whose random streams are keyed by
//! `(seed, source, shard)`, so the output does not depend on how many
//! threads run the shards.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};
use crate::eo_comb::ModulatorSettings;
use crate::model::{pair_rate, ArrayConfig};
use crate::rng::{substream, Domain};
use crate::tags::{TagRecord, TagStream};
use crate::FWHM_PER_SIGMA;

/// Coincidence-peak width reproducing the measured 867 ps FWHM.
pub const DEFAULT_JITTER_FWHM_PS: f64 = 867.0;

pub const CH_SIGNAL: u16 = 0;
pub const CH_IDLER: u16 = 1;
/// Second idler arm behind the 50:50 splitter in the HBT layout.
pub const CH_IDLER_2: u16 = 2;

/// Target number of events per shard.
const EVENTS_PER_SHARD: f64 = 1e5;

/// Folded unbalanced interferometer acting on both photons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FransonSettings {
    pub delay_ns: f64,
    /// Total phase φ_s+i accumulated by the pair.
    pub phase_rad: f64,
    pub visibility: f64,
}

impl FransonSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.visibility) {
            return domain(format!("visibility must lie in [0, 1], got {}", self.visibility));
        }
        if !(self.delay_ns > 0.0) || !self.delay_ns.is_finite() {
            return domain("interferometer delay must be > 0");
        }
        if !self.phase_rad.is_finite() {
            return domain("interferometer phase must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthScenario {
    pub array: ArrayConfig,
    /// On-chip pump power for each ring, in array order.
    pub pump_power_mw: Vec<f64>,
    pub duration_s: f64,
    /// FWHM of the signal-idler delay distribution.
    pub jitter_fwhm_ps: f64,
    pub seed: u64,
    pub resolution_ps: u32,
    /// Optional non-paralyzable dead time applied to every channel.
    pub dead_time_ps: Option<f64>,
    pub franson: Option<FransonSettings>,
    pub mixing: Option<ModulatorSettings>,
}

impl SynthScenario {
    /// Scenario with default jitter, 1 ps resolution and no dead time.
    pub fn new(array: ArrayConfig, pump_power_mw: Vec<f64>, duration_s: f64, seed: u64) -> Self {
        Self {
            array,
            pump_power_mw,
            duration_s,
            jitter_fwhm_ps: DEFAULT_JITTER_FWHM_PS,
            seed,
            resolution_ps: 1,
            dead_time_ps: None,
            franson: None,
            mixing: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return domain(format!("duration must be > 0, got {} s", self.duration_s));
        }
        if !(self.jitter_fwhm_ps > 0.0) || !self.jitter_fwhm_ps.is_finite() {
            return domain(format!("jitter FWHM must be > 0, got {} ps", self.jitter_fwhm_ps));
        }
        if self.resolution_ps == 0 {
            return domain("resolution must be >= 1 ps");
        }
        if self.pump_power_mw.len() != self.array.len() {
            return domain(format!(
                "{} pump powers given for {} resonators",
                self.pump_power_mw.len(),
                self.array.len()
            ));
        }
        if let Some(p) = self.pump_power_mw.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return domain(format!("pump power must be >= 0, got {p} mW"));
        }
        if let Some(d) = self.dead_time_ps {
            if !(d >= 0.0) || !d.is_finite() {
                return domain("dead time must be >= 0");
            }
        }
        if let Some(f) = &self.franson {
            f.validate()?;
        }
        if let Some(m) = &self.mixing {
            m.validate()?;
        }
        Ok(())
    }

    /// Internal pair rate of each ring in Hz.
    pub fn pair_rates_hz(&self) -> Result<Vec<f64>> {
        self.array
            .resonators()
            .iter()
            .zip(&self.pump_power_mw)
            .map(|(r, p)| pair_rate(r, *p))
            .collect()
    }

    /// Hex SHA-256 of the scenario serialized as JSON.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// What happens to the two photons of a pair after the chip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Routing {
    /// Signal and idler each go to their own detector.
    Direct { signal: u16, idler: u16 },
    /// Idler split 50:50 between two detectors.
    SplitIdler { signal: u16, idler_a: u16, idler_b: u16 },
    /// Both photons cross a folded unbalanced interferometer.
    Franson { signal: u16, idler: u16, settings: FransonSettings },
    /// Fixed per-pair outcome probabilities before the channel efficiencies:
    /// both photons pass, only the signal passes, only the idler passes.
    Filtered { signal: u16, idler: u16, p_both: f64, p_signal_only: f64, p_idler_only: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSource {
    pub rate_hz: f64,
    pub eta_signal: f64,
    pub eta_idler: f64,
    pub routing: Routing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DarkSource {
    pub channel: u16,
    pub rate_hz: f64,
}

/// Everything the event engine needs, independent of the experiment type.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionPlan {
    pub sources: Vec<PairSource>,
    pub darks: Vec<DarkSource>,
    pub channel_count: u16,
    pub duration_s: f64,
    pub jitter_fwhm_ps: f64,
    pub resolution_ps: u32,
    pub dead_time_ps: Option<f64>,
    pub seed: u64,
}

impl EmissionPlan {
    fn from_scenario(s: &SynthScenario, routing: Routing, channel_count: u16) -> Result<Self> {
        s.validate()?;
        let ch = s.array.channels();
        let sources = s
            .pair_rates_hz()?
            .into_iter()
            .map(|rate_hz| PairSource {
                rate_hz,
                eta_signal: ch.efficiency_signal,
                eta_idler: ch.efficiency_idler,
                routing,
            })
            .collect();
        let mut darks = vec![
            DarkSource { channel: CH_SIGNAL, rate_hz: ch.dark_rate_signal_hz },
            DarkSource { channel: CH_IDLER, rate_hz: ch.dark_rate_idler_hz },
        ];
        if channel_count > 2 {
            darks.push(DarkSource { channel: CH_IDLER_2, rate_hz: ch.dark_rate_idler_hz });
        }
        Ok(Self {
            sources,
            darks,
            channel_count,
            duration_s: s.duration_s,
            jitter_fwhm_ps: s.jitter_fwhm_ps,
            resolution_ps: s.resolution_ps,
            dead_time_ps: s.dead_time_ps,
            seed: s.seed,
        })
    }
}

/// Plain pair stream: channel 0 signal, channel 1 idler.
pub fn synthesize(scenario: &SynthScenario) -> Result<TagStream> {
    let routing = Routing::Direct { signal: CH_SIGNAL, idler: CH_IDLER };
    let mut out = run_plan(&EmissionPlan::from_scenario(scenario, routing, 2)?)?;
    out.metadata = scenario.digest();
    Ok(out)
}

/// Pairs sent through the folded Franson interferometer in `scenario.franson`.
pub fn synthesize_franson(scenario: &SynthScenario) -> Result<TagStream> {
    let settings = scenario
        .franson
        .ok_or_else(|| Error::Domain("scenario has no interferometer settings".into()))?;
    settings.validate()?;
    let routing = Routing::Franson { signal: CH_SIGNAL, idler: CH_IDLER, settings };
    let mut out = run_plan(&EmissionPlan::from_scenario(scenario, routing, 2)?)?;
    out.metadata = scenario.digest();
    Ok(out)
}

/// Heralded-photon layout: channel 0 herald, channels 1 and 2 idler arms.
pub fn synthesize_hbt(scenario: &SynthScenario) -> Result<TagStream> {
    let routing = Routing::SplitIdler { signal: CH_SIGNAL, idler_a: CH_IDLER, idler_b: CH_IDLER_2 };
    let mut out = run_plan(&EmissionPlan::from_scenario(scenario, routing, 3)?)?;
    out.metadata = scenario.digest();
    Ok(out)
}

fn max_duration_s(resolution_ps: u32) -> f64 {
    u64::MAX as f64 * resolution_ps as f64 * 1e-12 * 0.5
}

fn shard_len_s(rate_hz: f64, duration_s: f64) -> f64 {
    if rate_hz <= 0.0 {
        return duration_s;
    }
    (EVENTS_PER_SHARD / rate_hz).clamp(1e-3, 10.0).min(duration_s)
}

struct Shard {
    kind: ShardKind,
    index: usize,
    start_s: f64,
    len_s: f64,
}

enum ShardKind {
    Pairs(usize),
    Dark(usize),
}

/// Runs the event engine.
pub fn run_plan(plan: &EmissionPlan) -> Result<TagStream> {
    if !(plan.duration_s > 0.0) || !plan.duration_s.is_finite() {
        return domain(format!("duration must be > 0, got {} s", plan.duration_s));
    }
    if !(plan.jitter_fwhm_ps > 0.0) {
        return domain("jitter FWHM must be > 0");
    }
    if plan.resolution_ps == 0 {
        return domain("resolution must be >= 1 ps");
    }
    let max_s = max_duration_s(plan.resolution_ps);
    if plan.duration_s > max_s {
        return Err(Error::TickOverflow { max_duration_s: max_s, resolution_ps: plan.resolution_ps });
    }
    for s in &plan.sources {
        if !(s.rate_hz >= 0.0) || !s.rate_hz.is_finite() {
            return domain(format!("pair rate must be >= 0, got {}", s.rate_hz));
        }
        for eta in [s.eta_signal, s.eta_idler] {
            if !(0.0..=1.0).contains(&eta) {
                return domain(format!("efficiency must lie in [0, 1], got {eta}"));
            }
        }
    }

    let mut shards = Vec::new();
    for (i, s) in plan.sources.iter().enumerate() {
        push_shards(&mut shards, ShardKind::Pairs, i, s.rate_hz, plan.duration_s);
    }
    for (i, d) in plan.darks.iter().enumerate() {
        if !(d.rate_hz >= 0.0) {
            return domain("dark rate must be >= 0");
        }
        push_shards(&mut shards, ShardKind::Dark, i, d.rate_hz, plan.duration_s);
    }

    let sigma_ps = plan.jitter_fwhm_ps / FWHM_PER_SIGMA / std::f64::consts::SQRT_2;
    let jitter = Normal::new(0.0, sigma_ps).map_err(|e| Error::Domain(e.to_string()))?;

    let mut records: Vec<TagRecord> = shards
        .par_iter()
        .map(|sh| run_shard(plan, sh, &jitter))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    records.par_sort_unstable();

    if let Some(dead_ps) = plan.dead_time_ps.filter(|d| *d > 0.0) {
        records = apply_dead_time(records, (dead_ps / plan.resolution_ps as f64).round() as u64, plan.channel_count);
    }
    TagStream::new(plan.resolution_ps, plan.channel_count, records)
}

fn push_shards(out: &mut Vec<Shard>, kind: fn(usize) -> ShardKind, source: usize, rate: f64, duration: f64) {
    if rate <= 0.0 {
        return;
    }
    let len = shard_len_s(rate, duration);
    let n = (duration / len).ceil() as usize;
    for k in 0..n {
        let start = k as f64 * len;
        out.push(Shard { kind: kind(source), index: k, start_s: start, len_s: len.min(duration - start) });
    }
}

fn run_shard(plan: &EmissionPlan, shard: &Shard, jitter: &Normal<f64>) -> Result<Vec<TagRecord>> {
    let res = plan.resolution_ps as f64;
    let start_tick = (shard.start_s * 1e12 / res).round() as i128;
    let len_ps = shard.len_s * 1e12;
    let to_tick = |local_ps: f64| -> u64 {
        let t = start_tick + (local_ps / res).round() as i128;
        t.clamp(0, u64::MAX as i128) as u64
    };
    let (domain_tag, source, rate) = match shard.kind {
        ShardKind::Pairs(i) => (Domain::Pairs, i, plan.sources[i].rate_hz),
        ShardKind::Dark(i) => (Domain::Dark, i, plan.darks[i].rate_hz),
    };
    let mut rng = substream(plan.seed, domain_tag, source as u64, shard.index as u64);
    let n = poisson_draw(&mut rng, rate * shard.len_s)?;
    let mut out = Vec::new();
    match shard.kind {
        ShardKind::Dark(i) => {
            let ch = plan.darks[i].channel;
            out.reserve(n as usize);
            for _ in 0..n {
                let t = rng.random::<f64>() * len_ps;
                out.push(TagRecord { timestamp: to_tick(t), channel: ch });
            }
        }
        ShardKind::Pairs(i) => {
            let src = &plan.sources[i];
            for _ in 0..n {
                let t = rng.random::<f64>() * len_ps;
                emit_pair(&mut rng, src, t, jitter, &mut |local_ps, channel| {
                    out.push(TagRecord { timestamp: to_tick(local_ps), channel })
                });
            }
        }
    }
    Ok(out)
}

fn poisson_draw(rng: &mut ChaCha8Rng, mean: f64) -> Result<u64> {
    if mean <= 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(mean).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(d.sample(rng) as u64)
}

fn emit_pair(
    rng: &mut ChaCha8Rng,
    src: &PairSource,
    t_ps: f64,
    jitter: &Normal<f64>,
    push: &mut impl FnMut(f64, u16),
) {
    match src.routing {
        Routing::Direct { signal, idler } => {
            if rng.random::<f64>() < src.eta_signal {
                push(t_ps + jitter.sample(rng), signal);
            }
            if rng.random::<f64>() < src.eta_idler {
                push(t_ps + jitter.sample(rng), idler);
            }
        }
        Routing::SplitIdler { signal, idler_a, idler_b } => {
            if rng.random::<f64>() < src.eta_signal {
                push(t_ps + jitter.sample(rng), signal);
            }
            if rng.random::<f64>() < src.eta_idler {
                let ch = if rng.random::<bool>() { idler_a } else { idler_b };
                push(t_ps + jitter.sample(rng), ch);
            }
        }
        Routing::Franson { signal, idler, settings } => {
            let delay_ps = settings.delay_ns * 1e3;
            let long_s = rng.random::<bool>();
            let long_i = rng.random::<bool>();
            // each photon leaves by the detected port or the other one
            let (det_s, det_i) = if long_s == long_i {
                let c = settings.visibility * settings.phase_rad.cos();
                let u = rng.random::<f64>();
                let p_same = 0.25 * (1.0 + c);
                if u < p_same {
                    (true, true)
                } else if u < 2.0 * p_same {
                    (false, false)
                } else if u < 2.0 * p_same + 0.25 * (1.0 - c) {
                    (true, false)
                } else {
                    (false, true)
                }
            } else {
                (rng.random::<bool>(), rng.random::<bool>())
            };
            let ds = if long_s { delay_ps } else { 0.0 };
            let di = if long_i { delay_ps } else { 0.0 };
            if det_s && rng.random::<f64>() < src.eta_signal {
                push(t_ps + ds + jitter.sample(rng), signal);
            }
            if det_i && rng.random::<f64>() < src.eta_idler {
                push(t_ps + di + jitter.sample(rng), idler);
            }
        }
        Routing::Filtered { signal, idler, p_both, p_signal_only, p_idler_only } => {
            let u = rng.random::<f64>();
            let (pass_s, pass_i) = if u < p_both {
                (true, true)
            } else if u < p_both + p_signal_only {
                (true, false)
            } else if u < p_both + p_signal_only + p_idler_only {
                (false, true)
            } else {
                (false, false)
            };
            if pass_s && rng.random::<f64>() < src.eta_signal {
                push(t_ps + jitter.sample(rng), signal);
            }
            if pass_i && rng.random::<f64>() < src.eta_idler {
                push(t_ps + jitter.sample(rng), idler);
            }
        }
    }
}

fn apply_dead_time(records: Vec<TagRecord>, dead_ticks: u64, channels: u16) -> Vec<TagRecord> {
    let mut last: Vec<Option<u64>> = vec![None; channels as usize];
    records
        .into_iter()
        .filter(|r| {
            let slot = &mut last[r.channel as usize];
            match *slot {
                Some(t) if r.timestamp - t < dead_ticks => false,
                _ => {
                    *slot = Some(r.timestamp);
                    true
                }
            }
        })
        .collect()
}

/// Noise-free expectations of a plain pair scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectedCounts {
    pub singles_signal_hz: f64,
    pub singles_idler_hz: f64,
    /// True coincidences falling in a window centred on the peak.
    pub coincidences: f64,
    /// Accidental coincidences in one window of the same width.
    pub accidentals: f64,
}

/// Closed-form singles, coincidence and accidental expectations over the
/// scenario duration for a centred window of `window_ps`.
pub fn expected_counts(scenario: &SynthScenario, window_ps: f64) -> Result<ExpectedCounts> {
    scenario.validate()?;
    let ch = scenario.array.channels();
    let rates = scenario.pair_rates_hz()?;
    let total: f64 = rates.iter().sum();
    let s_sig = total * ch.efficiency_signal + ch.dark_rate_signal_hz;
    let s_idl = total * ch.efficiency_idler + ch.dark_rate_idler_hz;
    let sigma = scenario.jitter_fwhm_ps / FWHM_PER_SIGMA;
    let frac = statrs::function::erf::erf(window_ps / (2.0 * std::f64::consts::SQRT_2 * sigma));
    let t = scenario.duration_s;
    Ok(ExpectedCounts {
        singles_signal_hz: s_sig,
        singles_idler_hz: s_idl,
        coincidences: total * ch.efficiency_signal * ch.efficiency_idler * frac * t,
        accidentals: s_sig * s_idl * window_ps * 1e-12 * t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_detuned_array, ChannelModel, ResonatorSpec};

    fn one_ring(eff: f64, ch: ChannelModel) -> ArrayConfig {
        let r = ResonatorSpec::from_device_table(2).unwrap().with_pairgen(eff).unwrap();
        ArrayConfig::new(vec![r], ch).unwrap()
    }

    /// 1 mW pump so the pair rate equals `eff` GHz.
    fn scenario(rate_hz: f64, ch: ChannelModel, duration: f64, seed: u64) -> SynthScenario {
        SynthScenario::new(one_ring(rate_hz * 1e-9, ch), vec![1.0], duration, seed)
    }

    fn coincidences_within(stream: &TagStream, window_ps: i64) -> u64 {
        let s = stream.channel_times_ps(CH_SIGNAL);
        let i = stream.channel_times_ps(CH_IDLER);
        let mut lo = 0;
        let mut n = 0;
        for &ts in &s {
            while lo < i.len() && i[lo] < ts - window_ps {
                lo += 1;
            }
            let mut k = lo;
            while k < i.len() && i[k] <= ts + window_ps {
                n += 1;
                k += 1;
            }
        }
        n
    }

    #[test]
    fn lossless_limit_pairs_all_detected() {
        let rate = 2e4;
        let t = 2.0;
        let s = synthesize(&scenario(rate, ChannelModel::ideal(), t, 11)).unwrap();
        let n_s = s.count(CH_SIGNAL) as f64;
        let n_i = s.count(CH_IDLER) as f64;
        assert_eq!(n_s, n_i);
        let expect = rate * t;
        assert!((n_s - expect).abs() < 4.0 * expect.sqrt(), "{n_s} vs {expect}");
        // ±5 ns captures every true pair
        let cc = coincidences_within(&s, 5_000) as f64;
        assert!((cc - expect).abs() < 4.0 * expect.sqrt() + 2.0, "{cc}");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut ch = ChannelModel::ideal();
        ch.efficiency_signal = 0.3;
        ch.dark_rate_idler_hz = 1e3;
        let sc = scenario(1e5, ch, 0.5, 42);
        let a = synthesize(&sc).unwrap();
        let b = synthesize(&sc).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| synthesize(&sc).unwrap());
        assert_eq!(a.digest(), c.digest());
        let mut other = sc.clone();
        other.seed = 43;
        assert_ne!(synthesize(&other).unwrap().digest(), a.digest());
    }

    #[test]
    fn thinning_matches_efficiency() {
        let ch = ChannelModel {
            bus_loss_db: 0.0,
            efficiency_signal: 0.2,
            efficiency_idler: 0.05,
            dark_rate_signal_hz: 2e3,
            dark_rate_idler_hz: 500.0,
        };
        let rate = 5e5;
        let t = 1.0;
        let s = synthesize(&scenario(rate, ch, t, 3)).unwrap();
        for (chan, eta, dark) in [(CH_SIGNAL, 0.2, 2e3), (CH_IDLER, 0.05, 500.0)] {
            let expect = (rate * eta + dark) * t;
            let got = s.count(chan) as f64;
            assert!((got - expect).abs() < 4.0 * expect.sqrt(), "ch {chan}: {got} vs {expect}");
        }
    }

    #[test]
    fn accidental_floor_of_uncorrelated_channels() {
        // darks only: S1 = S2 = 1e5 Hz, window 1 ns -> 10 Hz
        let ch = ChannelModel {
            bus_loss_db: 0.0,
            efficiency_signal: 1.0,
            efficiency_idler: 1.0,
            dark_rate_signal_hz: 1e5,
            dark_rate_idler_hz: 1e5,
        };
        let t = 20.0;
        let s = synthesize(&scenario(0.0, ch, t, 5)).unwrap();
        let cc = coincidences_within(&s, 500) as f64;
        let expect = 1e5 * 1e5 * 1e-9 * t;
        assert!((cc - expect).abs() < 4.0 * expect.sqrt(), "{cc} vs {expect}");
    }

    #[test]
    fn overflow_and_domain_errors() {
        let sc = scenario(10.0, ChannelModel::ideal(), 1e9, 1);
        assert!(matches!(synthesize(&sc), Err(Error::TickOverflow { .. })));
        let sc = scenario(10.0, ChannelModel::ideal(), 0.0, 1);
        assert!(synthesize(&sc).is_err());
        let mut sc = scenario(10.0, ChannelModel::ideal(), 1.0, 1);
        sc.franson = Some(FransonSettings { delay_ns: 16.0, phase_rad: 0.0, visibility: 1.2 });
        assert!(matches!(synthesize_franson(&sc), Err(Error::Domain(_))));
        sc.franson = None;
        assert!(synthesize_franson(&sc).is_err());
    }

    #[test]
    fn dead_time_removes_close_events() {
        let ch = ChannelModel {
            bus_loss_db: 0.0,
            efficiency_signal: 1.0,
            efficiency_idler: 1.0,
            dark_rate_signal_hz: 5e6,
            dark_rate_idler_hz: 0.0,
        };
        let mut sc = scenario(0.0, ch, 0.01, 9);
        sc.dead_time_ps = Some(50_000.0);
        let s = synthesize(&sc).unwrap();
        let t = s.channel_times_ps(CH_SIGNAL);
        assert!(t.windows(2).all(|w| w[1] - w[0] >= 50_000));
        // non-paralyzable: measured = true / (1 + true·τ)
        let expect = 5e6 / (1.0 + 5e6 * 50e-9) * 0.01;
        assert!((t.len() as f64 - expect).abs() < 5.0 * expect.sqrt());
    }

    #[test]
    fn hbt_splits_idler_evenly() {
        let sc = scenario(1e5, ChannelModel::ideal(), 1.0, 17);
        let s = synthesize_hbt(&sc).unwrap();
        let a = s.count(CH_IDLER) as f64;
        let b = s.count(CH_IDLER_2) as f64;
        assert_eq!(s.channel_count(), 3);
        assert!((a - b).abs() < 4.0 * (a + b).sqrt());
        assert_eq!(a + b, s.count(CH_SIGNAL) as f64);
    }

    #[test]
    fn franson_singles_phase_independent() {
        let mut counts = Vec::new();
        for phase in [0.0, std::f64::consts::PI] {
            let mut sc = scenario(2e5, ChannelModel::ideal(), 1.0, 23);
            sc.franson = Some(FransonSettings { delay_ns: 16.0, phase_rad: phase, visibility: 1.0 });
            let s = synthesize_franson(&sc).unwrap();
            counts.push((s.count(CH_SIGNAL) as f64, s.count(CH_IDLER) as f64));
        }
        // half of the photons leave by the detected port
        for (s, i) in &counts {
            assert!((s - 1e5).abs() < 4.0 * 1e5f64.sqrt());
            assert!((i - 1e5).abs() < 4.0 * 1e5f64.sqrt());
        }
    }

    #[test]
    fn expected_counts_scale_with_power() {
        let base = ResonatorSpec::from_device_table(2).unwrap();
        let arr = build_detuned_array(&base, 1, 0.0)
            .unwrap()
            .with_channels(ChannelModel::from_losses(13.5, 12.5, 0.85, true))
            .unwrap();
        let e1 = expected_counts(&SynthScenario::new(arr.clone(), vec![0.01], 1.0, 0), 867.0).unwrap();
        let e2 = expected_counts(&SynthScenario::new(arr, vec![0.1], 1.0, 0), 867.0).unwrap();
        assert!((e2.coincidences / e1.coincidences - 100.0).abs() < 1e-9);
        assert!((e2.accidentals / e1.accidentals - 1e4).abs() < 1e-6);
    }
}
