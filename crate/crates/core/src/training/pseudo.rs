use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply, AugmentationSpec};
use crate::data::types::SensorWindow;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::training::classifier::Classifier;
use crate::training::losses::{softmax_rows, to_f64};

pub const DEFAULT_THRESHOLD: f64 = 0.30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoEntry {
    /// Index into the target windows that were labeled.
    pub index: usize,
    pub probs: Vec<f64>,
    pub max_prob: f64,
}

/// Soft pseudo-labels that passed the confidence filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoEntry>,
    pub threshold: f64,
    pub excluded: usize,
    pub n_classes: usize,
}

impl PseudoLabelSet {
    /// Keeps row `i` iff its largest probability is at least `threshold`.
    pub fn from_probabilities(probs: &Array2<f64>, threshold: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::Config(format!("pseudo-label threshold must lie in [0, 1), got {threshold}")));
        }
        let mut entries = Vec::new();
        for (index, row) in probs.outer_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Training(format!("row {index} is not a probability vector")));
            }
            let max_prob = row.fold(0.0f64, |a, &b| a.max(b));
            if max_prob >= threshold {
                entries.push(PseudoEntry {
                    index,
                    probs: row.to_vec(),
                    max_prob,
                });
            }
        }
        Ok(Self {
            excluded: probs.nrows() - entries.len(),
            entries,
            threshold,
            n_classes: probs.ncols(),
        })
    }

    /// The subset passing a stricter threshold.
    pub fn refilter(&self, threshold: f64) -> Result<Self> {
        if threshold < self.threshold {
            return Err(Error::Config(format!(
                "cannot lower the threshold from {} to {threshold} without the excluded rows",
                self.threshold
            )));
        }
        let entries: Vec<PseudoEntry> = self.entries.iter().filter(|e| e.max_prob >= threshold).cloned().collect();
        Ok(Self {
            excluded: self.excluded + self.entries.len() - entries.len(),
            entries,
            threshold,
            n_classes: self.n_classes,
        })
    }

    pub fn retained_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    /// Retained count per argmax class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for e in &self.entries {
            let arg = e
                .probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0;
            counts[arg] += 1;
        }
        counts
    }
}

/// Teacher softmax (temperature 1) on weakly augmented target windows,
/// filtered at `threshold`. The weak perturbation is drawn once per window.
pub fn pseudo_label(
    teacher: &mut Classifier,
    expected_classes: usize,
    target: &[SensorWindow],
    weak: &AugmentationSpec,
    threshold: f64,
    seed: u64,
) -> Result<PseudoLabelSet> {
    if teacher.n_classes() != expected_classes {
        return Err(Error::Training(format!(
            "teacher predicts {} classes, source has {expected_classes}",
            teacher.n_classes()
        )));
    }
    let weak_windows: Vec<SensorWindow> = target
        .par_iter()
        .enumerate()
        .map(|(i, w)| apply(weak, w, derive_seed(seed, "weak", i as u64)))
        .collect::<Result<_>>()?;
    let refs: Vec<&SensorWindow> = weak_windows.iter().collect();
    let logits = to_f64(&teacher.logits(&refs).into_dyn())?;
    let set = PseudoLabelSet::from_probabilities(&softmax_rows(logits.view()), threshold)?;
    log::info!(
        "pseudo-labels: kept {} of {} target windows at threshold {threshold}",
        set.entries.len(),
        target.len()
    );
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn filter_examples() {
        let p = array![[0.25, 0.25, 0.25, 0.25], [0.7, 0.1, 0.1, 0.1], [0.3, 0.3, 0.2, 0.2]];
        let s = PseudoLabelSet::from_probabilities(&p, 0.30).unwrap();
        assert_eq!(s.retained_indices(), vec![1, 2]);
        assert_eq!(s.excluded, 1);
        let all = PseudoLabelSet::from_probabilities(&p, 0.0).unwrap();
        assert_eq!(all.entries.len(), 3);
        assert_eq!(s.refilter(0.5).unwrap().retained_indices(), vec![1]);
        assert!(PseudoLabelSet::from_probabilities(&array![[0.5, 0.6]], 0.3).is_err());
    }

    #[test]
    fn uniform_teacher_excludes_all() {
        let p = Array2::from_elem((5, 11), 1.0 / 11.0);
        let s = PseudoLabelSet::from_probabilities(&p, DEFAULT_THRESHOLD).unwrap();
        assert!(s.entries.is_empty());
        assert_eq!(s.excluded, 5);
    }
}
