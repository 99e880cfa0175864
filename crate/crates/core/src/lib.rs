//! Few-shot cross-domain human activity recognition.
//!
//! A teacher trained on an augmented, labeled source dataset pseudo-labels
//! weakly augmented target windows; a student initialized from the teacher
//! is trained on source cross-entropy, a KL consistency term on strongly
//! augmented target windows and an NT-Xent contrastive term on target
//! views; finally a fresh classifier head is fit on a handful of labeled
//! target windows per class on top of the frozen student encoder.

pub mod augment;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod models;
pub mod nn;
pub mod rng;
pub mod training;

pub use data::{DatasetBundle, FoldSpec, SensorWindow};
pub use error::{Error, Result};
pub use evaluation::{ConfusionMatrix, MetricsReport};
pub use experiment::{ExperimentConfig, Method, Runner, StageName};
