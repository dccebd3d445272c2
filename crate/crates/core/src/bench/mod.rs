//! Configuration-driven experiments: run every controller on every seed,
//! stream the per-iteration records to CSV and summarize them.
//!
//! A run directory holds `manifest.json` (schema version and the resolved
//! configuration), `records.csv`, `summary.json`, `reference.csv` and
//! `trajectories.csv`. Error columns are reproducible bit for bit from the
//! configuration; the timing columns are wall-clock measurements.

mod config;
mod run;
mod summary;

pub use config::{ExperimentConfig, PlantConfig, PLANT_KINDS};
pub use run::{
    read_records, run_experiment, AbortedCell, RunReport, MANIFEST_FILE, RECORDS_FILE, RECORDS_HEADER, REFERENCE_FILE,
    SUMMARY_FILE, TRAJECTORIES_FILE,
};
pub use summary::{iterations_to_fraction, summarize, ControllerSummary, Summary};

/// Version of the run-directory layout.
pub const SCHEMA_VERSION: u32 = 1;
