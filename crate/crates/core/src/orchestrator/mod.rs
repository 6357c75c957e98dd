//! End-to-end experiments: federation setup, the co-boosting loop and its
//! baselines, sweeps and reports.

mod config;
mod run;
mod sweep;

pub use config::{ExperimentConfig, Method, SweepSpec, Toggles, Variant};
pub use run::{average_parameters, run_id, run_method, Federation, RunResult, RunSummary};
pub use sweep::{open_dataset, report, run_all_seeds, sweep, SweepOutcome};
