//! Experiment orchestration: config files, the staged pipeline, baselines,
//! ablation suites, and comparison reports.

pub mod ablate;
pub mod config;
pub mod pipeline;
pub mod report;

pub use ablate::{run_ablation_suite, SUITES};
pub use config::{
    BenchSource, ExperimentConfig, OptimSettings, SelfTrainToggles, Stage1Mode, StageToggles,
    OUT_ROOT_ENV,
};
pub use pipeline::{
    resolve_data, run_pipeline, train_baseline, BaselineKind, ResolvedData, RunKind, RunManifest,
    RunStatus,
};
pub use report::{build_report, render_text, write_report, ReportDoc, ReportRow};
