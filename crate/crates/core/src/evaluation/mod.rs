//! Metrics, the few-shot protocol and result reporting.

pub mod ablation;
pub mod metrics;
pub mod protocol;
pub mod report;

pub use ablation::{ablation_configs, ablation_suite, ablation_suite_with, Ablation};
pub use metrics::{macro_f1, ConfusionMatrix};
pub use protocol::{run_methods, run_protocol};
pub use report::{compare_methods, population_std, Comparison, MetricsReport, NSummary, RunRecord, Summary, SummaryRow};
