//! Experiment harness: presets, multi-seed runs, ablations, sweeps and
//! report generation.

mod config;
mod report;
mod runner;

pub use config::{preset_specs, ExperimentConfig, ExperimentData, PRESETS};
pub use report::{emit_report, forgetting_curve, line_plot, table_csv, table_markdown};
pub use runner::{
    median, run_ablation_matrix, run_alpha_sweep, run_experiment, run_gamma_alpha_grid, RunManifest, RunResults,
    SeedResult, SplitMaps, TableRow, TaskResult, ABLATION_ROWS, ERROR_FILE, MANIFEST_FILE, RESULTS_FILE,
};
