use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts with rows indexed by true class and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Evaluation("confusion matrix must be square".into()));
        }
        Ok(Self {
            n,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Evaluation(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::Evaluation(format!("class index out of range for {n_classes} classes")));
            }
            cm.add(t, p);
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.n + predicted] += 1;
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class F1; a class with no true positives scores 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let row: u64 = (0..self.n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.n).map(|t| self.get(t, c)).sum();
                if tp == 0.0 {
                    return 0.0;
                }
                let prec = tp / col as f64;
                let rec = tp / row as f64;
                2.0 * prec * rec / (prec + rec)
            })
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.n).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }
}

/// Macro F1 over all `|C|` classes. Classes absent from both truth and
/// predictions contribute 0 and still count in the divisor.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.n_classes() == 0 || cm.total() == 0 {
        return Err(Error::Evaluation("macro F1 of an empty confusion matrix".into()));
    }
    Ok(cm.per_class_f1().iter().sum::<f64>() / cm.n_classes() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap();
        let f1 = macro_f1(&cm).unwrap();
        // prec (0.6, 0.8), recall (0.75, 2/3)
        let want = (2.0 * 0.6 * 0.75 / 1.35 + 2.0 * 0.8 * (2.0 / 3.0) / (0.8 + 2.0 / 3.0)) / 2.0;
        assert!((f1 - want).abs() < 1e-12);
        assert!((f1 - 0.6970).abs() < 1e-4);
    }

    #[test]
    fn perfect_and_empty() {
        let cm = ConfusionMatrix::from_predictions(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(macro_f1(&cm).unwrap(), 1.0);
        assert!(macro_f1(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn absent_class_counts_in_divisor() {
        let cm = ConfusionMatrix::from_predictions(&[0, 1], &[0, 1], 3).unwrap();
        assert!((macro_f1(&cm).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }
}
