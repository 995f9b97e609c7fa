//! `qcomb`: synthesis and analysis runs with reproducible reports.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status for usage errors; clap uses the same value.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NOT_CONVERGED: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "qcomb", version, about = "Microresonator photon-pair source simulation and analysis")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw; drawn and recorded when absent.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "qcomb-out")]
    pub out: PathBuf,
    /// Coincidence window; defaults to the fitted FWHM.
    #[arg(long = "window-ps", global = true)]
    pub window_ps: Option<f64>,
    /// Histogram bin width.
    #[arg(long = "bin-ps", global = true)]
    pub bin_ps: Option<i64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Layout {
    /// Signal on channel 0, idler on channel 1.
    Plain,
    /// Both photons through the folded interferometer.
    Franson,
    /// Idler split over channels 1 and 2.
    Hbt,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a time-tag file from a scenario.
    Simulate {
        #[arg(long, value_enum, default_value_t = Layout::Plain)]
        layout: Layout,
    },
    /// Histogram, peak fit and pair metrics of a tag file or histogram CSV.
    Coincidence {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        signal: u16,
        #[arg(long, default_value_t = 1)]
        idler: u16,
        /// Half-width of the delay range histogrammed from a tag file.
        #[arg(long = "span-ps", default_value_t = 20_000)]
        span_ps: i64,
    },
    /// Franson phase scan: synthesis, three-peak analysis and fringe fit.
    Franson {
        /// Phase points over one period.
        #[arg(long, default_value_t = 8)]
        phases: usize,
    },
    /// Heralded g2 from a three-channel tag file or an HBT synthesis.
    G2h {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long = "tau-max-ps", default_value_t = 40_000.0)]
        tau_max_ps: f64,
        #[arg(long = "tau-step-ps", default_value_t = 1_000.0)]
        tau_step_ps: f64,
    },
    /// Joint spectral intensity over the `[filters]` grid.
    Jsi,
    /// Frequency-bin fringe: analytic and synthesized, or fitted from a recorded scan.
    Freqbin {
        /// Recorded `phi_m_rad,counts` table.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        phases: usize,
        /// Relative pump phase of the two rings.
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
        /// Accidental floor subtracted from a recorded scan.
        #[arg(long, default_value_t = 0.0)]
        accidentals: f64,
    },
    /// Maximum-likelihood tomography of 36 projection counts.
    Tomo {
        #[arg(long)]
        input: PathBuf,
        /// Accidental counts subtracted from every setting.
        #[arg(long)]
        accidentals: Option<f64>,
        #[arg(long, default_value_t = 6)]
        restarts: usize,
    },
    /// Power sweep with fitted scaling laws.
    Sweep {
        /// Comma-separated powers in mW; defaults to `pump.sweep_mw`.
        #[arg(long, value_delimiter = ',')]
        powers: Option<Vec<f64>>,
    },
    /// Write the bundled fixture files.
    Fixtures,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QCOMB_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qcomb: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
