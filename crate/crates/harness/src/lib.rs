//! Experiment harness: benchmark generation, protocol sweeps with a
//! restartable results CSV, Markdown reports and the gradient-check battery.
//!
//! Each (protocol, seed) cell is keyed by a digest of the parts of the
//! configuration it depends on, so results from an edited configuration are
//! never mistaken for current ones.

pub mod bench;
pub mod config;
pub mod error;
pub mod report;
pub mod run;

use adaptlab_core::gradcheck::{run_battery, CheckResult, GradcheckOptions};

pub use bench::{cmd_synth, load_benchmark, Benchmark};
pub use config::{ExperimentConfig, ProtocolEntry};
pub use error::{HarnessError, Result};
pub use report::cmd_report;
pub use run::{cmd_run, ResultRow, RunOptions, RunSummary};

/// Runs the finite-difference battery. `perturb` corrupts one analytic
/// gradient entry so the failure path can be exercised.
pub fn cmd_gradcheck(perturb: Option<f64>) -> Result<Vec<CheckResult>> {
    let options = GradcheckOptions {
        perturb,
        ..GradcheckOptions::default()
    };
    Ok(run_battery(&options)?)
}
