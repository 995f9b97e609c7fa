//! Simulation and analysis toolkit for multiplexed microresonator
//! entangled-photon-pair sources.
//!
//! The crate is organised around the measurement chain of a pair-source
//! experiment:
//!
//! * [`model`] holds resonator and array descriptions plus the closed-form
//!   pair-rate law.
//! * [`eo_comb`] implements the sideband algebra of sinusoidal phase
//!   modulation.
//! * [`synth`] turns a scenario into a time-tagged detection stream
//!   ([`tags::TagStream`]) by Monte Carlo.
//! * [`coincidence`] builds start-stop histograms, fits the coincidence
//!   peak and derives N_cc, N_acc, CAR and on-chip rates.
//! * [`entanglement`] covers Franson fringes, visibility fits and the
//!   heralded g2.
//! * [`freqbin`] models frequency-bin qubits, the mixing modulator and JSI
//!   scans.
//! * [`tomography`] reconstructs two-qubit density matrices by maximum
//!   likelihood.

pub mod coincidence;
pub mod config;
pub mod entanglement;
pub mod eo_comb;
pub mod error;
pub mod fixtures;
pub mod freqbin;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tags;
pub mod tomography;

pub use coincidence::{CoincidenceHistogram, PairMetrics, PeakFit};
pub use eo_comb::{CombSpectrum, ModulatorSettings};
pub use error::{Error, Result};
pub use model::{ArrayConfig, ResonatorSpec};
pub use synth::SynthScenario;
pub use tags::TagStream;
pub use tomography::DensityMatrix;

/// Full width at half maximum of a Gaussian in units of its standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;
