use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type UserId = String;

/// One fixed-length `steps x channels` segment of accelerometer samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorWindow {
    pub samples: Array2<f32>,
    pub label: Option<usize>,
    pub user: UserId,
    pub dataset: String,
}

impl SensorWindow {
    pub fn steps(&self) -> usize {
        self.samples.nrows()
    }

    pub fn channels(&self) -> usize {
        self.samples.ncols()
    }

    /// Same metadata, new samples.
    pub fn with_samples(&self, samples: Array2<f32>) -> Self {
        Self {
            samples,
            label: self.label,
            user: self.user.clone(),
            dataset: self.dataset.clone(),
        }
    }
}

/// Per-channel normalization statistics plus where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// Dataset whose train split produced these statistics.
    pub fitted_on: String,
}

/// User partition for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_id: usize,
    pub test_users: BTreeSet<UserId>,
    pub val_users: BTreeSet<UserId>,
    pub train_users: BTreeSet<UserId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FoldSpec {
    pub fn role_of(&self, user: &str) -> Option<Split> {
        if self.train_users.contains(user) {
            Some(Split::Train)
        } else if self.val_users.contains(user) {
            Some(Split::Val)
        } else if self.test_users.contains(user) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn users(&self, split: Split) -> &BTreeSet<UserId> {
        match split {
            Split::Train => &self.train_users,
            Split::Val => &self.val_users,
            Split::Test => &self.test_users,
        }
    }
}

/// A dataset's windows, fold assignments, statistics and class names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub name: String,
    pub windows: Vec<SensorWindow>,
    pub folds: Vec<FoldSpec>,
    pub stats: Option<ChannelStats>,
    pub class_map: BTreeMap<String, usize>,
}

impl DatasetBundle {
    pub fn n_classes(&self) -> usize {
        self.class_map.len()
    }

    /// Class names ordered by index.
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<(usize, String)> = self.class_map.iter().map(|(k, &v)| (v, k.clone())).collect();
        names.sort();
        names.into_iter().map(|(_, n)| n).collect()
    }

    pub fn users(&self) -> BTreeSet<UserId> {
        self.windows.iter().map(|w| w.user.clone()).collect()
    }

    pub fn window_shape(&self) -> Option<(usize, usize)> {
        self.windows.first().map(|w| (w.steps(), w.channels()))
    }

    pub fn fold(&self, id: usize) -> Result<&FoldSpec> {
        self.folds
            .get(id)
            .ok_or_else(|| Error::Fold(format!("{} has no fold {id} ({} folds)", self.name, self.folds.len())))
    }

    /// Indices of windows whose user plays `split` in fold `fold`.
    pub fn split_indices(&self, fold: &FoldSpec, split: Split) -> Vec<usize> {
        let users = fold.users(split);
        self.windows
            .iter()
            .enumerate()
            .filter(|(_, w)| users.contains(&w.user))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_windows(&self, fold: &FoldSpec, split: Split) -> Vec<SensorWindow> {
        self.split_indices(fold, split)
            .into_iter()
            .map(|i| self.windows[i].clone())
            .collect()
    }

    /// Window count per class index (unlabeled windows excluded).
    pub fn class_histogram(&self) -> Vec<usize> {
        class_histogram(&self.windows, self.n_classes())
    }

    /// Checks the bundle-level invariants: constant window shape, finite
    /// samples, labels in range and a complete partition in every fold.
    pub fn validate(&self) -> Result<()> {
        let shape = self.window_shape();
        for w in &self.windows {
            if Some((w.steps(), w.channels())) != shape {
                return Err(Error::Shape(format!("{}: windows of differing shape", self.name)));
            }
            if w.samples.iter().any(|v| !v.is_finite()) {
                return Err(Error::Ingestion(format!("{}: non-finite sample for user {}", self.name, w.user)));
            }
            if let Some(l) = w.label {
                if l >= self.n_classes() {
                    return Err(Error::Ingestion(format!("{}: label {l} out of range", self.name)));
                }
            }
        }
        let users = self.users();
        for fold in &self.folds {
            for u in &users {
                if fold.role_of(u).is_none() {
                    return Err(Error::Fold(format!("user {u} missing from fold {}", fold.fold_id)));
                }
            }
        }
        Ok(())
    }
}

pub fn class_histogram(windows: &[SensorWindow], n_classes: usize) -> Vec<usize> {
    let mut hist = vec![0; n_classes];
    for w in windows {
        if let Some(l) = w.label {
            if l < n_classes {
                hist[l] += 1;
            }
        }
    }
    hist
}
