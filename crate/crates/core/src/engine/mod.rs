//! Experiment orchestration: configuration, client selection, the round
//! loop and result files.

pub mod config;
pub mod emit;
pub mod eval;
pub mod run;
pub mod select;

pub use config::{Algorithm, DatasetSource, ExperimentConfig, Selection, Timing};
pub use emit::{emit, fmt_g6, metrics_csv, summary_json, RunSummary};
pub use eval::{accuracy, evaluate_global};
pub use run::{
    run_experiment, run_sweep, PersonalizationSummary, RoundMetrics, RoundOutcome, RunRecord,
    Simulation,
};
pub use select::{select_class_cover, select_random};
