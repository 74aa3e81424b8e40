//! Experiment orchestration: configuration, per-point pipeline, sweeps,
//! ablations, seed variability and report emission.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod plot;
pub mod results;

pub use commands::{
    cmd_ablate, cmd_evaluate, cmd_report, cmd_seedvar, cmd_simulate, cmd_sweep, cmd_train, write_report, Failure,
    ReportKind, SweepOutcome,
};
pub use config::{CohortSizes, EvalConfig, ExperimentConfig, Scale, TuningGrid, Variant};
pub use pipeline::{run_point, CellKey, CellSampler, DiffusionSampler, PointOutcome};
pub use results::{ResultRow, Summary, Timing};

/// Caps the global worker pool at `CDM_THREADS` when that variable is set.
pub fn init_threads() -> crate::Result<()> {
    let Ok(v) = std::env::var("CDM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| crate::CdmError::Config(format!("CDM_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| crate::CdmError::Config(format!("cannot size the worker pool: {e}")))
}
