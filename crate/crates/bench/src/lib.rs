//! Shared fixtures for the benchmarks.

use truthfed_core::experiments::ExperimentConfig;
use truthfed_core::protocol::{Simulation, SimulationConfig};
use truthfed_core::{CoverageInstance, MechanismKind, Result};

/// Paper-size configuration with no mechanism, so local deltas keep growing.
pub fn paper_config(seed: u64) -> Result<SimulationConfig> {
    let cfg = ExperimentConfig {
        mechanism: MechanismKind::None,
        ..ExperimentConfig::default()
    };
    cfg.simulation_config(seed)
}

/// The selection problem the server would face after `steps` local steps.
pub fn pending_instance(seed: u64, steps: u64) -> Result<CoverageInstance> {
    let mut sim = Simulation::new(paper_config(seed)?)?;
    for _ in 0..steps {
        sim.step()?;
    }
    sim.pending_instance()
}
