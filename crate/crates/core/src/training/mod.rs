//! Teacher, pseudo-labeling, student and few-shot stages, plus baselines.

pub mod baselines;
pub mod classifier;
pub mod fewshot;
pub mod fit;
pub mod losses;
pub mod pseudo;
pub mod search;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::spec::{conv_encoder_spec, deepconvlstm_spec, ModelGraphSpec};
use crate::models::{Checkpoint, Stage};

pub use baselines::{naive_transfer, pretrain_cpc, pretrain_simclr, train_conv_classifier, CpcHyper, SimclrHyper};
pub use classifier::{batch_tensor, embed, Classifier};
pub use fewshot::{fewshot_finetune, sample_per_class, EmbeddedSplit, FewshotData, FewshotOutcome};
pub use fit::{train_student, train_teacher, StudentInputs};
pub use losses::{cross_entropy, kl_consistency, nt_xent, KlDirection, LossValue};
pub use pseudo::{pseudo_label, PseudoEntry, PseudoLabelSet, DEFAULT_THRESHOLD};
pub use search::{hyperparameter_search, Candidate, SearchOutcome, SearchSpace};

/// Encoder architecture used by every stage of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Conv,
    DeepConvLstm,
}

impl EncoderKind {
    pub fn spec(self, steps: usize, channels: usize) -> Result<ModelGraphSpec> {
        match self {
            EncoderKind::Conv => conv_encoder_spec(steps, channels),
            EncoderKind::DeepConvLstm => deepconvlstm_spec(steps, channels),
        }
    }
}

/// Optimizer and schedule settings of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimHyper {
    pub lr: f32,
    /// Decoupled weight decay.
    pub weight_decay: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl OptimHyper {
    pub fn teacher() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 256,
            max_epochs: 100,
            patience: 15,
        }
    }

    /// `batch_size = 0` means "about a third of the labeled windows".
    pub fn fewshot() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 0,
            max_epochs: 100,
            patience: 15,
        }
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("{stage}: lr must be > 0 and weight decay >= 0")));
        }
        Ok(())
    }
}

/// Weights of the two target terms of the student objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    pub kl_direction: KlDirection,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.7,
            lambda2: 0.8,
            temperature: 0.1,
            kl_direction: KlDirection::PseudoToStudent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_f1: Option<f64>,
}

/// Loss of one optimizer step, split into its terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub kl: Option<f64>,
    pub simclr: Option<f64>,
}

/// What a training stage produced.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_f1: Option<f64>,
    pub wall_time_s: f64,
    pub seed: u64,
}

impl StageResult {
    pub fn stage(&self) -> Stage {
        self.checkpoint.stage
    }

    /// Writes `epochs.csv` and `steps.csv` into `dir`.
    pub fn write_curves(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_records(&dir.join("epochs.csv"), &self.epochs)?;
        write_records(&dir.join("steps.csv"), &self.steps)
    }
}

fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Training(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Training(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seed and configuration identity stamped on checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunContext {
    pub seed: u64,
    pub config_hash: String,
}

impl RunContext {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            seed,
            config_hash: config_hash.into(),
        }
    }
}

pub(crate) fn check_finite(stage: &str, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.to_string(),
            detail: format!("{what} = {value}"),
        })
    }
}
