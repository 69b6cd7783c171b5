//! Experiment orchestration for `adra-core`: configuration files, the
//! one-vs-rest, hold-one-out, small-mode and disentanglement recipes,
//! adapter bundles and CSV/SVG reports.

pub mod bundle;
pub mod config;
pub mod experiments;
pub mod report;

pub use bundle::{load_backbone, save_backbone, AdapterBundle, Container};
pub use config::{Experiment, ExperimentConfig, MethodEntry};
pub use experiments::{
    execute, plan, pretrain_backbone, report_params, run, run_pretrain, workspace, RunOutcome,
};
