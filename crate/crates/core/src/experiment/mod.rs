//! Experiment configuration, the in-memory pipeline and the on-disk,
//! stage-by-stage runner.

pub mod config;
pub mod pipeline;
pub mod runner;

pub use config::{
    ensure_valid, validate_config, AblationFlags, AugmentConfig, BaselineConfig, DataConfig, Diagnostic, ExperimentConfig, Method,
    PathsConfig, SearchConfig, SearchStage, Severity, StageName, SYNTHETIC_SOURCE, SYNTHETIC_TARGET,
};
pub use pipeline::{load_dataset, Pipeline, Prepared};
pub use runner::{Runner, StageOutcome, DATASETS_ROOT_ENV};
