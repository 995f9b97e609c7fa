//! Resonator and array descriptions and the closed-form pair-rate law.
//!
//! Frequencies are absolute optical frequencies in GHz stored as `f64`.
//! Around 193 THz the spacing between adjacent doubles is ~3e-11 GHz, so
//! sub-GHz heater detunings keep far better than kHz resolution.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Maximum number of rings sharing one bus waveguide.
pub const MAX_RESONATORS: usize = 20;

/// Default fractional depth of a resonance dip in bus transmission.
pub const DEFAULT_DIP_DEPTH: f64 = 0.95;

/// Nominal pump frequency of the device (about 1560 nm).
pub const NOMINAL_PUMP_GHZ: f64 = 192_150.0;

/// Measured device parameters: ring id, loaded Q, pair-generation
/// efficiency in GHz/mW², free spectral range in GHz.
pub const DEVICE_TABLE: [(u32, f64, f64, f64); 5] = [
    (1, 2.0e5, 0.43, 650.7),
    (2, 3.1e5, 1.01, 650.67),
    (3, 3.0e5, 0.77, 650.87),
    (4, 6.4e5, 2.60, 650.7),
    (5, 2.9e5, 0.27, 650.7),
];

/// Unvalidated resonator description, as read from a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonatorParams {
    pub id: u32,
    pub center_pump_ghz: f64,
    /// Defaults to one FSR above the pump.
    #[serde(default)]
    pub center_signal_ghz: Option<f64>,
    /// Defaults to one FSR below the pump.
    #[serde(default)]
    pub center_idler_ghz: Option<f64>,
    pub fsr_ghz: f64,
    pub q_loaded: f64,
    /// Optional cross-check against `center_pump_ghz / q_loaded`.
    #[serde(default)]
    pub linewidth_mhz: Option<f64>,
    #[serde(default)]
    pub detuning_ghz: f64,
    pub pairgen_ghz_per_mw2: f64,
}

/// One microring: resonance frequencies, loaded Q, FSR, heater detuning
/// and pair-generation efficiency.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResonatorSpec {
    id: u32,
    center_pump_ghz: f64,
    center_signal_ghz: f64,
    center_idler_ghz: f64,
    fsr_ghz: f64,
    q_loaded: f64,
    linewidth_mhz: f64,
    detuning_ghz: f64,
    pairgen_ghz_per_mw2: f64,
}

impl ResonatorSpec {
    pub fn new(p: ResonatorParams) -> Result<Self> {
        let key = |k: &str| format!("resonator.{}.{}", p.id, k);
        if !(p.q_loaded > 0.0) || !p.q_loaded.is_finite() {
            return Err(Error::Config(format!("{}: must be > 0", key("q_loaded"))));
        }
        if !(p.fsr_ghz > 0.0) || !p.fsr_ghz.is_finite() {
            return Err(Error::Config(format!("{}: must be > 0", key("fsr_ghz"))));
        }
        if !(p.pairgen_ghz_per_mw2 >= 0.0) || !p.pairgen_ghz_per_mw2.is_finite() {
            return Err(Error::Config(format!(
                "{}: must be >= 0",
                key("pairgen_ghz_per_mw2")
            )));
        }
        if !(p.center_pump_ghz > 0.0) || !p.center_pump_ghz.is_finite() {
            return Err(Error::Config(format!("{}: must be > 0", key("center_pump_ghz"))));
        }
        if !p.detuning_ghz.is_finite() {
            return Err(Error::Config(format!("{}: must be finite", key("detuning_ghz"))));
        }
        let linewidth_mhz = p.center_pump_ghz / p.q_loaded * 1e3;
        if let Some(given) = p.linewidth_mhz {
            if ((given - linewidth_mhz) / linewidth_mhz).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "{}: {given} MHz inconsistent with center_pump_ghz/q_loaded = {linewidth_mhz} MHz",
                    key("linewidth_mhz")
                )));
            }
        }
        let signal = p.center_signal_ghz.unwrap_or(p.center_pump_ghz + p.fsr_ghz);
        let idler = p.center_idler_ghz.unwrap_or(p.center_pump_ghz - p.fsr_ghz);
        let mismatch = (signal + idler - 2.0 * p.center_pump_ghz).abs();
        if mismatch > linewidth_mhz * 1e-3 {
            return Err(Error::Config(format!(
                "resonator.{}: signal and idler not symmetric about the pump ({mismatch} GHz > one linewidth)",
                p.id
            )));
        }
        Ok(Self {
            id: p.id,
            center_pump_ghz: p.center_pump_ghz,
            center_signal_ghz: signal,
            center_idler_ghz: idler,
            fsr_ghz: p.fsr_ghz,
            q_loaded: p.q_loaded,
            linewidth_mhz,
            detuning_ghz: p.detuning_ghz,
            pairgen_ghz_per_mw2: p.pairgen_ghz_per_mw2,
        })
    }

    /// Ring `id` of the five-ring device, centred on [`NOMINAL_PUMP_GHZ`].
    pub fn from_device_table(id: u32) -> Result<Self> {
        let &(id, q, eff, fsr) = DEVICE_TABLE
            .iter()
            .find(|row| row.0 == id)
            .ok_or_else(|| Error::Domain(format!("no ring {id} in the device table")))?;
        Self::new(ResonatorParams {
            id,
            center_pump_ghz: NOMINAL_PUMP_GHZ,
            center_signal_ghz: None,
            center_idler_ghz: None,
            fsr_ghz: fsr,
            q_loaded: q,
            linewidth_mhz: None,
            detuning_ghz: 0.0,
            pairgen_ghz_per_mw2: eff,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }
    pub fn fsr_ghz(&self) -> f64 {
        self.fsr_ghz
    }
    pub fn q_loaded(&self) -> f64 {
        self.q_loaded
    }
    pub fn linewidth_mhz(&self) -> f64 {
        self.linewidth_mhz
    }
    pub fn linewidth_ghz(&self) -> f64 {
        self.linewidth_mhz * 1e-3
    }
    pub fn detuning_ghz(&self) -> f64 {
        self.detuning_ghz
    }
    pub fn pairgen_ghz_per_mw2(&self) -> f64 {
        self.pairgen_ghz_per_mw2
    }

    /// Pump resonance including the heater detuning.
    pub fn pump_ghz(&self) -> f64 {
        self.center_pump_ghz + self.detuning_ghz
    }
    pub fn signal_ghz(&self) -> f64 {
        self.center_signal_ghz + self.detuning_ghz
    }
    pub fn idler_ghz(&self) -> f64 {
        self.center_idler_ghz + self.detuning_ghz
    }

    pub fn with_id(mut self, id: u32) -> Self {
        self.id = id;
        self
    }
    pub fn with_detuning(mut self, detuning_ghz: f64) -> Self {
        self.detuning_ghz = detuning_ghz;
        self
    }
    pub fn with_pairgen(mut self, ghz_per_mw2: f64) -> Result<Self> {
        if !(ghz_per_mw2 >= 0.0) {
            return domain("pair-generation efficiency must be >= 0");
        }
        self.pairgen_ghz_per_mw2 = ghz_per_mw2;
        Ok(self)
    }

    pub fn params(&self) -> ResonatorParams {
        ResonatorParams {
            id: self.id,
            center_pump_ghz: self.center_pump_ghz,
            center_signal_ghz: Some(self.center_signal_ghz),
            center_idler_ghz: Some(self.center_idler_ghz),
            fsr_ghz: self.fsr_ghz,
            q_loaded: self.q_loaded,
            linewidth_mhz: Some(self.linewidth_mhz),
            detuning_ghz: self.detuning_ghz,
            pairgen_ghz_per_mw2: self.pairgen_ghz_per_mw2,
        }
    }
}

/// Detection-chain parameters shared by every ring on the bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub bus_loss_db: f64,
    /// Bus-waveguide-to-detector transmission including detector efficiency.
    pub efficiency_signal: f64,
    pub efficiency_idler: f64,
    pub dark_rate_signal_hz: f64,
    pub dark_rate_idler_hz: f64,
}

impl ChannelModel {
    pub fn ideal() -> Self {
        Self {
            bus_loss_db: 0.0,
            efficiency_signal: 1.0,
            efficiency_idler: 1.0,
            dark_rate_signal_hz: 0.0,
            dark_rate_idler_hz: 0.0,
        }
    }

    /// Channel efficiencies from path losses in dB and a detector
    /// efficiency. When `loss_includes_detector` is set the detector factor
    /// is taken to be already part of the quoted loss.
    pub fn from_losses(
        loss_signal_db: f64,
        loss_idler_db: f64,
        detector_efficiency: f64,
        loss_includes_detector: bool,
    ) -> Self {
        let det = if loss_includes_detector { 1.0 } else { detector_efficiency };
        Self {
            bus_loss_db: 0.0,
            efficiency_signal: db_to_transmission(loss_signal_db) * det,
            efficiency_idler: db_to_transmission(loss_idler_db) * det,
            dark_rate_signal_hz: 0.0,
            dark_rate_idler_hz: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("efficiency_signal", self.efficiency_signal),
            ("efficiency_idler", self.efficiency_idler),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name}: must lie in (0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("dark_rate_signal_hz", self.dark_rate_signal_hz),
            ("dark_rate_idler_hz", self.dark_rate_idler_hz),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name}: must be >= 0, got {v}")));
            }
        }
        if !self.bus_loss_db.is_finite() {
            return Err(Error::Config("bus_loss_db: must be finite".into()));
        }
        Ok(())
    }
}

pub fn db_to_transmission(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}

/// Rings coupled to one bus waveguide plus the shared detection chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArrayConfig {
    resonators: Vec<ResonatorSpec>,
    channels: ChannelModel,
}

impl ArrayConfig {
    pub fn new(resonators: Vec<ResonatorSpec>, channels: ChannelModel) -> Result<Self> {
        if resonators.is_empty() {
            return Err(Error::Config("array: at least one resonator required".into()));
        }
        if resonators.len() > MAX_RESONATORS {
            return Err(Error::Config(format!(
                "array: {} resonators exceeds the maximum of {MAX_RESONATORS}",
                resonators.len()
            )));
        }
        let mut ids: Vec<u32> = resonators.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("array: resonator ids must be unique".into()));
        }
        channels.validate()?;
        Ok(Self { resonators, channels })
    }

    pub fn resonators(&self) -> &[ResonatorSpec] {
        &self.resonators
    }
    pub fn channels(&self) -> &ChannelModel {
        &self.channels
    }
    pub fn len(&self) -> usize {
        self.resonators.len()
    }
    pub fn is_empty(&self) -> bool {
        self.resonators.is_empty()
    }

    pub fn with_channels(self, channels: ChannelModel) -> Result<Self> {
        Self::new(self.resonators, channels)
    }

    /// On-chip pump power after one facet of bus loss.
    pub fn on_chip_power_mw(&self, off_chip_mw: f64) -> f64 {
        off_chip_mw * db_to_transmission(self.channels.bus_loss_db)
    }
}

/// Internal pair-generation rate in Hz at the given on-chip pump power.
pub fn pair_rate(spec: &ResonatorSpec, pump_power_mw: f64) -> Result<f64> {
    if !(pump_power_mw >= 0.0) || !pump_power_mw.is_finite() {
        return domain(format!("pump power must be finite and >= 0, got {pump_power_mw} mW"));
    }
    Ok(spec.pairgen_ghz_per_mw2 * 1e9 * pump_power_mw * pump_power_mw)
}

/// Bus transmission near the resonance of `spec` closest to `freq_ghz`,
/// modelled as a Lorentzian dip of fractional depth `dip_depth`.
pub fn lorentzian_transmission(spec: &ResonatorSpec, freq_ghz: f64, dip_depth: f64) -> f64 {
    let fsr = spec.fsr_ghz;
    let offset = (freq_ghz - spec.pump_ghz() + 0.5 * fsr).rem_euclid(fsr) - 0.5 * fsr;
    let half = 0.5 * spec.linewidth_ghz();
    let depth = dip_depth.clamp(0.0, 1.0);
    1.0 - depth * half * half / (offset * offset + half * half)
}

/// `n` copies of `base` with detunings `0, offset, 2·offset, ...`.
///
/// Detunings past one free spectral range wrap onto the next resonance.
/// The channel model is ideal; replace it with [`ArrayConfig::with_channels`].
pub fn build_detuned_array(base: &ResonatorSpec, n: usize, offset_ghz: f64) -> Result<ArrayConfig> {
    if n == 0 {
        return domain("array needs at least one resonator");
    }
    if !offset_ghz.is_finite() {
        return domain("offset must be finite");
    }
    let fsr = base.fsr_ghz;
    let rings = (0..n)
        .map(|m| {
            let mut detuning = m as f64 * offset_ghz;
            if detuning.abs() > fsr {
                detuning = detuning.rem_euclid(fsr);
            }
            base.clone().with_id(m as u32 + 1).with_detuning(base.detuning_ghz + detuning)
        })
        .collect();
    ArrayConfig::new(rings, ChannelModel::ideal())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ring(id: u32) -> ResonatorSpec {
        ResonatorSpec::from_device_table(id).unwrap()
    }

    #[test]
    fn pair_rate_examples() {
        assert_relative_eq!(pair_rate(&ring(4), 1.0).unwrap(), 2.6e9, max_relative = 1e-12);
        assert_eq!(pair_rate(&ring(3), 0.0).unwrap(), 0.0);
        let r2 = pair_rate(&ring(2), 0.0673).unwrap();
        assert_relative_eq!(r2, 1.01e9 * 0.0673 * 0.0673, max_relative = 1e-12);
        assert!((r2 - 4.574e6).abs() < 1e3);
        assert!(matches!(pair_rate(&ring(1), -1e-3), Err(Error::Domain(_))));
    }

    #[test]
    fn linewidth_follows_q() {
        let r = ring(2);
        assert_relative_eq!(r.linewidth_mhz(), NOMINAL_PUMP_GHZ / 3.1e5 * 1e3, max_relative = 1e-12);
        // close to the 616 MHz quoted for this ring
        assert!((r.linewidth_mhz() - 616.0).abs() < 10.0);
        let mut p = r.params();
        p.linewidth_mhz = Some(600.0);
        assert!(ResonatorSpec::new(p).is_err());
    }

    #[test]
    fn rejects_asymmetric_signal_idler() {
        let mut p = ring(1).params();
        p.center_signal_ghz = Some(p.center_pump_ghz + p.fsr_ghz + 5.0);
        assert!(ResonatorSpec::new(p).is_err());
    }

    #[test]
    fn transmission_examples() {
        let r = ring(2);
        let f0 = r.pump_ghz();
        let gamma = r.linewidth_ghz();
        assert!(lorentzian_transmission(&r, f0, 1.0).abs() < 1e-15);
        assert_relative_eq!(lorentzian_transmission(&r, f0 + gamma / 2.0, 1.0), 0.5, epsilon = 1e-9);
        assert_relative_eq!(lorentzian_transmission(&r, f0 - gamma / 2.0, 1.0), 0.5, epsilon = 1e-9);
        assert!(lorentzian_transmission(&r, f0 + 100.0 * gamma, 1.0) >= 0.9999);
        // next resonance on the FSR grid
        assert!(lorentzian_transmission(&r, f0 + r.fsr_ghz(), 1.0) < 1e-9);
        assert_relative_eq!(lorentzian_transmission(&r, f0, DEFAULT_DIP_DEPTH), 0.05, epsilon = 1e-12);
    }

    #[test]
    fn detuned_array_examples() {
        let base = ring(2);
        let a = build_detuned_array(&base, 5, 12.5).unwrap();
        let rel: Vec<f64> = a.resonators().iter().map(|r| r.pump_ghz() - base.pump_ghz()).collect();
        for (got, want) in rel.iter().zip([0.0, 12.5, 25.0, 37.5, 50.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        let single = build_detuned_array(&base, 1, 99.0).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.resonators()[0].detuning_ghz(), 0.0);
        let pair = build_detuned_array(&base, 2, 36.0).unwrap();
        let d = pair.resonators()[1].pump_ghz() - pair.resonators()[0].pump_ghz();
        assert!((d - 36.0).abs() < 1e-9);
        assert!(build_detuned_array(&base, 0, 1.0).is_err());
    }

    #[test]
    fn array_validation() {
        let r = ring(1);
        assert!(ArrayConfig::new(vec![r.clone(), r.clone()], ChannelModel::ideal()).is_err());
        let mut ch = ChannelModel::ideal();
        ch.efficiency_idler = 0.0;
        assert!(ArrayConfig::new(vec![r.clone()], ch).is_err());
        ch.efficiency_idler = 0.5;
        ch.dark_rate_signal_hz = -1.0;
        assert!(ArrayConfig::new(vec![r], ch).is_err());
    }

    #[test]
    fn loss_figures_to_efficiency() {
        let ch = ChannelModel::from_losses(13.5, 12.5, 0.85, true);
        assert_relative_eq!(ch.efficiency_signal * ch.efficiency_idler, 10f64.powf(-2.6), max_relative = 1e-12);
        let ch2 = ChannelModel::from_losses(13.5, 12.5, 0.85, false);
        assert_relative_eq!(ch2.efficiency_signal, ch.efficiency_signal * 0.85, max_relative = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pair_rate_is_quadratic(p in 0.0f64..10.0, alpha in 0.0f64..10.0) {
                let r = ring(4);
                let lhs = pair_rate(&r, alpha * p).unwrap();
                let rhs = alpha * alpha * pair_rate(&r, p).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
            }

            #[test]
            fn transmission_symmetric_and_periodic(d in 0.0f64..5.0, k in -3i32..3) {
                let r = ring(3);
                let f0 = r.pump_ghz();
                let t_plus = lorentzian_transmission(&r, f0 + d, 0.8);
                let t_minus = lorentzian_transmission(&r, f0 - d, 0.8);
                prop_assert!((t_plus - t_minus).abs() < 1e-9);
                let shifted = lorentzian_transmission(&r, f0 + d + k as f64 * r.fsr_ghz(), 0.8);
                prop_assert!((shifted - t_plus).abs() < 1e-6);
                prop_assert!((0.0..=1.0).contains(&t_plus));
            }

            #[test]
            fn detuned_array_increasing(n in 1usize..20, offset in 0.1f64..30.0) {
                let base = ring(2);
                prop_assume!(offset * (n as f64 - 1.0) <= base.fsr_ghz());
                let a = build_detuned_array(&base, n, offset).unwrap();
                let pumps: Vec<f64> = a.resonators().iter().map(|r| r.pump_ghz()).collect();
                prop_assert!(pumps.windows(2).all(|w| w[1] > w[0]));
                for r in a.resonators() {
                    prop_assert!(ResonatorSpec::new(r.params()).is_ok());
                }
            }
        }
    }
}
