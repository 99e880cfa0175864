//! The few-shot evaluation protocol as a single call.

use crate::error::Result;
use crate::evaluation::report::MetricsReport;
use crate::experiment::config::{ExperimentConfig, Method};
use crate::experiment::pipeline::Pipeline;

/// Trains every stage in memory and evaluates the self-trained student
/// over all seeds, folds and label budgets of `config`.
pub fn run_protocol(config: &ExperimentConfig) -> Result<MetricsReport> {
    Pipeline::new(config.clone())?.run_method(Method::CrossDomainHar)
}

/// Like [`run_protocol`] for any method; the teacher is trained once per
/// seed and shared between methods that need it.
pub fn run_methods(config: &ExperimentConfig, methods: &[Method]) -> Result<Vec<MetricsReport>> {
    let mut p = Pipeline::new(config.clone())?;
    methods.iter().map(|m| p.run_method(*m)).collect()
}
