//! TOML scenario files.
//!
//! ```toml
//! [array]
//! bus_loss_db = 0.0
//!
//! [resonator.2]
//! device = 2              # fill unset keys from the device table
//! detuning_ghz = 0.0
//!
//! [detectors]
//! loss_signal_db = 13.5
//! loss_idler_db = 12.5
//! detector_efficiency = 0.85
//! loss_includes_detector = false
//! dark_rate_signal_hz = 100.0
//! dark_rate_idler_hz = 100.0
//! jitter_fwhm_ps = 867.0
//!
//! [pump]
//! power_mw = 0.0673       # or one value per ring, in id order
//!
//! [experiment]
//! duration_s = 60.0
//! ```
//!
//! Optional `[franson]`, `[mixing]` and `[filters]` tables carry
//! interferometer, modulator and programmable-filter settings. Unknown
//! keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eo_comb::ModulatorSettings;
use crate::error::{Error, Result};
use crate::freqbin::FilterBank;
use crate::model::{ArrayConfig, ChannelModel, ResonatorParams, ResonatorSpec, DEVICE_TABLE, NOMINAL_PUMP_GHZ};
use crate::synth::{FransonSettings, SynthScenario, DEFAULT_JITTER_FWHM_PS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub array: ArraySection,
    pub resonator: BTreeMap<String, ResonatorSection>,
    #[serde(default)]
    pub detectors: DetectorSection,
    pub pump: PumpSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub franson: Option<FransonSettings>,
    #[serde(default)]
    pub mixing: Option<ModulatorSettings>,
    #[serde(default)]
    pub filters: Option<FilterBank>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySection {
    #[serde(default)]
    pub bus_loss_db: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonatorSection {
    /// Ring of the device table used for keys left unset.
    pub device: Option<u32>,
    pub center_pump_ghz: Option<f64>,
    pub center_signal_ghz: Option<f64>,
    pub center_idler_ghz: Option<f64>,
    pub fsr_ghz: Option<f64>,
    pub q_loaded: Option<f64>,
    pub linewidth_mhz: Option<f64>,
    #[serde(default)]
    pub detuning_ghz: f64,
    pub pairgen_ghz_per_mw2: Option<f64>,
}

/// Either explicit channel efficiencies or path losses plus a detector
/// efficiency; the two forms are exclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub efficiency_signal: Option<f64>,
    pub efficiency_idler: Option<f64>,
    pub loss_signal_db: Option<f64>,
    pub loss_idler_db: Option<f64>,
    #[serde(default = "default_detector_efficiency")]
    pub detector_efficiency: f64,
    #[serde(default)]
    pub loss_includes_detector: bool,
    #[serde(default)]
    pub dark_rate_signal_hz: f64,
    #[serde(default)]
    pub dark_rate_idler_hz: f64,
    #[serde(default = "default_jitter")]
    pub jitter_fwhm_ps: f64,
    #[serde(default = "default_resolution")]
    pub resolution_ps: u32,
    pub dead_time_ps: Option<f64>,
}

fn default_detector_efficiency() -> f64 {
    0.85
}
fn default_jitter() -> f64 {
    DEFAULT_JITTER_FWHM_PS
}
fn default_resolution() -> u32 {
    1
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            efficiency_signal: None,
            efficiency_idler: None,
            loss_signal_db: None,
            loss_idler_db: None,
            detector_efficiency: default_detector_efficiency(),
            loss_includes_detector: false,
            dark_rate_signal_hz: 0.0,
            dark_rate_idler_hz: 0.0,
            jitter_fwhm_ps: default_jitter(),
            resolution_ps: default_resolution(),
            dead_time_ps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PowerSpec {
    Uniform(f64),
    PerRing(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpSection {
    /// On-chip pump power per ring.
    pub power_mw: PowerSpec,
    /// Power grid of the `sweep` command, in mW.
    #[serde(default)]
    pub sweep_mw: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub duration_s: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub window_ps: Option<f64>,
    #[serde(default)]
    pub bin_ps: Option<i64>,
}

fn cfg<T>(msg: String) -> Result<T> {
    Err(Error::Config(msg))
}

impl ScenarioFile {
    /// Parses TOML; syntax and schema errors carry line and column.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Hex SHA-256 of the canonical JSON form. Tables are ordered maps and
    /// struct fields serialize in declaration order, so the digest does not
    /// depend on key order or formatting in the source file.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Rings ordered by id.
    pub fn resonators(&self) -> Result<Vec<ResonatorSpec>> {
        let mut out = Vec::with_capacity(self.resonator.len());
        for (key, r) in &self.resonator {
            let id: u32 = key
                .parse()
                .map_err(|_| Error::Config(format!("resonator.{key}: table name must be an integer ring id")))?;
            let row = match r.device {
                Some(d) => Some(
                    *DEVICE_TABLE
                        .iter()
                        .find(|row| row.0 == d)
                        .ok_or_else(|| Error::Config(format!("resonator.{key}.device: no ring {d} in the device table")))?,
                ),
                None => None,
            };
            let need = |v: Option<f64>, fallback: Option<f64>, name: &str| -> Result<f64> {
                v.or(fallback)
                    .ok_or_else(|| Error::Config(format!("resonator.{key}.{name}: missing (or set `device`)")))
            };
            let params = ResonatorParams {
                id,
                center_pump_ghz: r.center_pump_ghz.unwrap_or(NOMINAL_PUMP_GHZ),
                center_signal_ghz: r.center_signal_ghz,
                center_idler_ghz: r.center_idler_ghz,
                fsr_ghz: need(r.fsr_ghz, row.map(|x| x.3), "fsr_ghz")?,
                q_loaded: need(r.q_loaded, row.map(|x| x.1), "q_loaded")?,
                linewidth_mhz: r.linewidth_mhz,
                detuning_ghz: r.detuning_ghz,
                pairgen_ghz_per_mw2: need(r.pairgen_ghz_per_mw2, row.map(|x| x.2), "pairgen_ghz_per_mw2")?,
            };
            out.push(ResonatorSpec::new(params)?);
        }
        out.sort_by_key(|r| r.id());
        Ok(out)
    }

    pub fn channels(&self) -> Result<ChannelModel> {
        let d = &self.detectors;
        let explicit = d.efficiency_signal.is_some() || d.efficiency_idler.is_some();
        let losses = d.loss_signal_db.is_some() || d.loss_idler_db.is_some();
        let mut ch = match (explicit, losses) {
            (true, true) => {
                return cfg("detectors: give either efficiency_signal/efficiency_idler or loss_signal_db/loss_idler_db, not both".into())
            }
            (true, false) => ChannelModel {
                bus_loss_db: 0.0,
                efficiency_signal: d.efficiency_signal.unwrap_or(1.0),
                efficiency_idler: d.efficiency_idler.unwrap_or(1.0),
                dark_rate_signal_hz: 0.0,
                dark_rate_idler_hz: 0.0,
            },
            (false, true) => {
                if !(d.detector_efficiency > 0.0 && d.detector_efficiency <= 1.0) {
                    return cfg(format!("detectors.detector_efficiency: must lie in (0, 1], got {}", d.detector_efficiency));
                }
                for (k, v) in [("loss_signal_db", d.loss_signal_db), ("loss_idler_db", d.loss_idler_db)] {
                    if let Some(v) = v {
                        if !(v >= 0.0) {
                            return cfg(format!("detectors.{k}: must be >= 0, got {v}"));
                        }
                    }
                }
                ChannelModel::from_losses(
                    d.loss_signal_db.unwrap_or(0.0),
                    d.loss_idler_db.unwrap_or(0.0),
                    d.detector_efficiency,
                    d.loss_includes_detector,
                )
            }
            (false, false) => ChannelModel::ideal(),
        };
        ch.bus_loss_db = self.array.bus_loss_db;
        ch.dark_rate_signal_hz = d.dark_rate_signal_hz;
        ch.dark_rate_idler_hz = d.dark_rate_idler_hz;
        Ok(ch)
    }

    pub fn array(&self) -> Result<ArrayConfig> {
        ArrayConfig::new(self.resonators()?, self.channels()?).map_err(|e| match e {
            Error::Config(m) if !m.starts_with("array") && !m.starts_with("resonator") => {
                Error::Config(format!("detectors.{m}"))
            }
            other => other,
        })
    }

    pub fn pump_powers(&self, n: usize) -> Result<Vec<f64>> {
        match &self.pump.power_mw {
            PowerSpec::Uniform(p) => Ok(vec![*p; n]),
            PowerSpec::PerRing(v) if v.len() == n => Ok(v.clone()),
            PowerSpec::PerRing(v) => cfg(format!("pump.power_mw: {} values given for {n} resonators", v.len())),
        }
    }

    /// Builds the synthesis scenario; `seed` overrides `experiment.seed`.
    pub fn scenario(&self, seed: u64) -> Result<SynthScenario> {
        let array = self.array()?;
        let powers = self.pump_powers(array.len())?;
        if let Some(p) = powers.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return cfg(format!("pump.power_mw: must be >= 0, got {p}"));
        }
        let e = &self.experiment;
        if !(e.duration_s > 0.0) || !e.duration_s.is_finite() {
            return cfg(format!("experiment.duration_s: must be > 0, got {}", e.duration_s));
        }
        let d = &self.detectors;
        if !(d.jitter_fwhm_ps > 0.0) {
            return cfg(format!("detectors.jitter_fwhm_ps: must be > 0, got {}", d.jitter_fwhm_ps));
        }
        if d.resolution_ps == 0 {
            return cfg("detectors.resolution_ps: must be >= 1".into());
        }
        let mut s = SynthScenario::new(array, powers, e.duration_s, seed);
        s.jitter_fwhm_ps = d.jitter_fwhm_ps;
        s.resolution_ps = d.resolution_ps;
        s.dead_time_ps = d.dead_time_ps;
        s.franson = self.franson;
        s.mixing = self.mixing;
        if let Some(f) = &s.franson {
            f.validate().map_err(|e| Error::Config(format!("franson: {}", strip(e))))?;
        }
        if let Some(m) = &s.mixing {
            m.validate().map_err(|e| Error::Config(format!("mixing: {}", strip(e))))?;
        }
        s.validate().map_err(|e| Error::Config(strip(e)))?;
        Ok(s)
    }
}

impl ScenarioFile {
    /// Filter bank from `[filters]`, validated.
    pub fn filter_bank(&self) -> Result<Option<FilterBank>> {
        match &self.filters {
            Some(f) => {
                f.validate().map_err(|e| Error::Config(format!("filters.{}", strip(e))))?;
                Ok(Some(f.clone()))
            }
            None => Ok(None),
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Domain(m) | Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RING2: &str = r#"
[resonator.2]
device = 2

[detectors]
loss_signal_db = 13.5
loss_idler_db = 12.5

[pump]
power_mw = 0.0673

[experiment]
duration_s = 60.0
"#;

    #[test]
    fn minimal_scenario() {
        let f = ScenarioFile::parse(RING2).unwrap();
        let s = f.scenario(7).unwrap();
        assert_eq!(s.array.len(), 1);
        assert_eq!(s.array.resonators()[0].pairgen_ghz_per_mw2(), 1.01);
        let eta = s.array.channels().efficiency_signal;
        assert!((eta - 0.85 * 10f64.powf(-1.35)).abs() < 1e-15);
        assert_eq!(s.pump_power_mw, vec![0.0673]);
        assert_eq!(s.seed, 7);
    }

    #[test]
    fn detector_inclusion_is_selectable() {
        let text = RING2.replace("loss_idler_db = 12.5", "loss_idler_db = 12.5\nloss_includes_detector = true");
        let s = ScenarioFile::parse(&text).unwrap().scenario(0).unwrap();
        assert!((s.array.channels().efficiency_signal - 10f64.powf(-1.35)).abs() < 1e-15);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = RING2.replace("duration_s = 60.0", "duration_s = 60.0\ndurration = 1");
        let msg = ScenarioFile::parse(&text).unwrap_err().to_string();
        assert!(msg.contains("line 14"), "{msg}");
        assert!(msg.contains("durration"), "{msg}");
    }

    #[test]
    fn bad_type_reports_key() {
        let text = RING2.replace("power_mw = 0.0673", "power_mw = \"lots\"");
        let msg = ScenarioFile::parse(&text).unwrap_err().to_string();
        assert!(msg.contains("line 10"), "{msg}");
    }

    #[test]
    fn semantic_errors_name_the_key() {
        let zero = RING2.replace("duration_s = 60.0", "duration_s = 0.0");
        let msg = ScenarioFile::parse(&zero).unwrap().scenario(0).unwrap_err().to_string();
        assert!(msg.contains("experiment.duration_s"), "{msg}");
        let missing = RING2.replace("device = 2", "q_loaded = 1e5");
        let msg = ScenarioFile::parse(&missing).unwrap().scenario(0).unwrap_err().to_string();
        assert!(msg.contains("resonator.2.fsr_ghz"), "{msg}");
        let both = RING2.replace("[detectors]", "[detectors]\nefficiency_signal = 0.5");
        assert!(ScenarioFile::parse(&both).unwrap().scenario(0).is_err());
        let count = RING2.replace("power_mw = 0.0673", "power_mw = [0.1, 0.2]");
        let msg = ScenarioFile::parse(&count).unwrap().scenario(0).unwrap_err().to_string();
        assert!(msg.contains("pump.power_mw"), "{msg}");
    }

    #[test]
    fn digest_ignores_formatting() {
        let a = ScenarioFile::parse(RING2).unwrap();
        let reordered = "[experiment]\nduration_s = 60\n[pump]\npower_mw=0.0673\n[detectors]\nloss_idler_db = 12.5\nloss_signal_db = 13.5\n[resonator.2]\ndevice=2\n";
        let b = ScenarioFile::parse(reordered).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = ScenarioFile::parse(&RING2.replace("60.0", "61.0")).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn optional_sections() {
        let text = format!(
            "{RING2}\n[franson]\ndelay_ns = 1.4\nphase_rad = 0.0\nvisibility = 0.9\n\n[mixing]\nmod_freq_ghz = 18.0\nmod_depth_rad = 1.841\n"
        );
        let s = ScenarioFile::parse(&text).unwrap().scenario(0).unwrap();
        assert_eq!(s.franson.unwrap().visibility, 0.9);
        assert_eq!(s.mixing.unwrap().mod_freq_ghz, 18.0);
        let bad = text.replace("visibility = 0.9", "visibility = 1.5");
        let msg = ScenarioFile::parse(&bad).unwrap().scenario(0).unwrap_err().to_string();
        assert!(msg.contains("franson"), "{msg}");
    }

    #[test]
    fn filter_section() {
        let text = format!("{RING2}\n[filters]\ncenters_ghz = [1000.0, 1012.5]\nbandwidth_ghz = 5.0\nextinction_db = inf\n");
        let f = ScenarioFile::parse(&text).unwrap().filter_bank().unwrap().unwrap();
        assert_eq!(f.leakage(), 0.0);
        let bad = text.replace("bandwidth_ghz = 5.0", "bandwidth_ghz = -1.0");
        let msg = ScenarioFile::parse(&bad).unwrap().filter_bank().unwrap_err().to_string();
        assert!(msg.contains("filters.bandwidth_ghz"), "{msg}");
    }
}
