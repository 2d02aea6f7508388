//! Shared fixtures for the benchmarks.

use std::path::Path;

use adampc::{ExperimentConfig, ExperimentFile};

pub const OFFSET_TRACKING: &str = include_str!("../../../configs/offset_tracking.toml");

/// The scalar offset-tracking experiment with `steps` closed-loop steps.
pub fn offset_experiment(steps: usize) -> ExperimentConfig {
    let mut file = ExperimentFile::from_toml_str(OFFSET_TRACKING).expect("shipped config parses");
    file.sim.steps = steps;
    file.experiment(Path::new(".")).expect("shipped config builds")
}
