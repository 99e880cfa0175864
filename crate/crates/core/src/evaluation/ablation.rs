//! Component studies, each a delta over a base configuration.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluation::report::MetricsReport;
use crate::experiment::config::{ExperimentConfig, Method};
use crate::experiment::pipeline::{Pipeline, Prepared};
use crate::training::EncoderKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// `lambda2 = 0`.
    NoSimclr,
    /// Pseudo-labels and the consistency term see unperturbed windows.
    NoConsistency,
    /// Teacher and student train on the raw source.
    NoSourceAug,
    /// DeepConvLSTM encoder in place of the conv encoder.
    DeepConvLstm,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoSimclr,
        Ablation::NoConsistency,
        Ablation::NoSourceAug,
        Ablation::DeepConvLstm,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::NoSimclr => "ablation_no_simclr",
            Ablation::NoConsistency => "ablation_no_consistency",
            Ablation::NoSourceAug => "ablation_no_source_aug",
            Ablation::DeepConvLstm => "ablation_deepconvlstm",
        }
    }

    /// The base config with this study's delta applied.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Ablation::NoSimclr => cfg.ablation.no_simclr = true,
            Ablation::NoConsistency => cfg.ablation.no_consistency = true,
            Ablation::NoSourceAug => cfg.ablation.no_source_aug = true,
            Ablation::DeepConvLstm => cfg.encoder = EncoderKind::DeepConvLstm,
        }
        cfg
    }
}

pub fn ablation_configs(base: &ExperimentConfig) -> Vec<(Ablation, ExperimentConfig)> {
    Ablation::ALL.iter().map(|a| (*a, a.apply(base))).collect()
}

/// Runs the full protocol of every study on already prepared data.
pub fn ablation_suite_with(base: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<(Ablation, MetricsReport)>> {
    ablation_configs(base)
        .into_iter()
        .map(|(a, cfg)| {
            log::info!("ablation {}", a.tag());
            let report = Pipeline::with_data(cfg, prepared.clone()).run_method_as(Method::CrossDomainHar, a.tag())?;
            Ok((a, report))
        })
        .collect()
}

/// Loads the datasets of `base` and runs every study.
pub fn ablation_suite(base: &ExperimentConfig) -> Result<Vec<(Ablation, MetricsReport)>> {
    crate::experiment::config::ensure_valid(base)?;
    ablation_suite_with(base, &Prepared::load(base)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deltas() {
        let base = ExperimentConfig::default();
        let cfgs = ablation_configs(&base);
        assert_eq!(cfgs[0].1.effective_loss().lambda2, 0.0);
        assert_eq!(cfgs[0].1.effective_loss().lambda1, base.loss.lambda1);
        assert!(cfgs[1].1.effective_strong().is_identity());
        assert!(cfgs[1].1.effective_weak().is_identity());
        assert!(cfgs[2].1.ablation.no_source_aug);
        assert_eq!(cfgs[3].1.encoder, EncoderKind::DeepConvLstm);
    }
}
