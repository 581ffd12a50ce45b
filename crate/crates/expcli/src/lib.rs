//! Experiment harness: sweep configuration, seeded parallel sweeps with
//! CSV output, log-log rate fitting, and verification suites.

pub mod config;
pub mod error;
pub mod rate;
pub mod sweep;
pub mod verify;

pub use config::{ExperimentConfig, InitKind, OptimizerConfig};
pub use error::{CliError, Result};
pub use rate::{fit_rate, fit_rate_records, plotdata, Column, RateFit};
pub use sweep::{run_sweep, SweepRecord, CSV_HEADER};
pub use verify::{verify, Suite, VerifyOptions, VerifyReport};
