//! Few-shot fine-tuning of a fresh head on a frozen encoder.
//!
//! The encoder is run once per fold to embed the train, validation and
//! test users; head training then works on those embeddings only. Split
//! access is recorded so tests can assert that fine-tuning never reads the
//! test split.

use std::sync::Mutex;

use ndarray::{Array2, ArrayD, Axis};
use rand::seq::SliceRandom;

use crate::data::types::{DatasetBundle, FoldSpec, SensorWindow, Split};
use crate::error::{Error, Result};
use crate::evaluation::metrics::{macro_f1, ConfusionMatrix};
use crate::models::spec::mlp_head_spec;
use crate::nn::{AdamW, Graph, Mode, Network};
use crate::rng::rng_for;
use crate::training::classifier::{embed, infer};
use crate::training::losses::argmax_rows;
use crate::training::{check_finite, EpochRecord, OptimHyper};

/// Embedded, labeled windows of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSplit {
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
}

impl EmbeddedSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One fold of a target bundle seen through a frozen encoder.
#[derive(Debug)]
pub struct FewshotData {
    pub n_classes: usize,
    pub encoder_digest: String,
    train: EmbeddedSplit,
    val: EmbeddedSplit,
    test: EmbeddedSplit,
    access: Mutex<Vec<Split>>,
}

fn embed_split(encoder: &mut Network, windows: &[SensorWindow]) -> Result<EmbeddedSplit> {
    let labeled: Vec<&SensorWindow> = windows.iter().filter(|w| w.label.is_some()).collect();
    Ok(EmbeddedSplit {
        features: embed(encoder, &labeled),
        labels: labeled.iter().map(|w| w.label.expect("filtered")).collect(),
    })
}

impl FewshotData {
    /// Embeds every labeled window of the fold. Fails if the encoder's
    /// weights change while doing so.
    pub fn build(encoder: &Network, bundle: &DatasetBundle, fold: &FoldSpec) -> Result<Self> {
        let mut enc = encoder.clone();
        let before = enc.digest();
        let train = embed_split(&mut enc, &bundle.split_windows(fold, Split::Train))?;
        let val = embed_split(&mut enc, &bundle.split_windows(fold, Split::Val))?;
        let test = embed_split(&mut enc, &bundle.split_windows(fold, Split::Test))?;
        let after = enc.digest();
        if before != after || before != encoder.digest() {
            return Err(Error::Training("encoder weights changed while frozen".into()));
        }
        Ok(Self::from_splits(bundle.n_classes(), before, train, val, test))
    }

    pub fn from_splits(
        n_classes: usize,
        encoder_digest: String,
        train: EmbeddedSplit,
        val: EmbeddedSplit,
        test: EmbeddedSplit,
    ) -> Self {
        Self {
            n_classes,
            encoder_digest,
            train,
            val,
            test,
            access: Mutex::new(Vec::new()),
        }
    }

    fn touch(&self, split: Split) {
        self.access.lock().expect("access log").push(split);
    }

    pub fn train(&self) -> &EmbeddedSplit {
        self.touch(Split::Train);
        &self.train
    }

    pub fn val(&self) -> &EmbeddedSplit {
        self.touch(Split::Val);
        &self.val
    }

    pub fn test(&self) -> &EmbeddedSplit {
        self.touch(Split::Test);
        &self.test
    }

    /// Splits read so far, in order.
    pub fn accessed(&self) -> Vec<Split> {
        self.access.lock().expect("access log").clone()
    }

    pub fn clear_access_log(&self) {
        self.access.lock().expect("access log").clear();
    }
}

/// Draws up to `n` indices per class, uniformly without replacement.
/// Classes with fewer than `n` windows contribute all of theirs and yield
/// a warning; a class with none is an error.
pub fn sample_per_class(labels: &[usize], n_classes: usize, n: usize, seed: u64) -> Result<(Vec<usize>, Vec<String>)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l < n_classes {
            by_class[l].push(i);
        }
    }
    let missing: Vec<usize> = (0..n_classes).filter(|&c| by_class[c].is_empty()).collect();
    if !missing.is_empty() {
        return Err(Error::Fold(format!("classes {missing:?} have no windows in the fold's train split")));
    }
    let mut picked = Vec::new();
    let mut warnings = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < n {
            warnings.push(format!("class {c}: only {} of {n} windows available", idx.len()));
        }
        idx.shuffle(&mut rng_for(seed, "fewshot-sample", c as u64));
        idx.truncate(n);
        picked.extend(idx);
    }
    Ok((picked, warnings))
}

/// Batch size for `total` labeled windows: about a third, so an epoch is
/// roughly three batches.
pub fn fewshot_batch_size(total: usize) -> usize {
    ((total as f64 / 3.0).round() as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct FewshotOutcome {
    pub head: Network,
    /// Indices into the train split that were used.
    pub sampled: Vec<usize>,
    pub warnings: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub encoder_digest: String,
}

impl FewshotOutcome {
    /// Confusion matrix and macro F1 of the head on `split`.
    pub fn evaluate(&self, split: &EmbeddedSplit, n_classes: usize) -> Result<(ConfusionMatrix, f64)> {
        evaluate_head(&self.head, split, n_classes)
    }
}

pub fn evaluate_head(head: &Network, split: &EmbeddedSplit, n_classes: usize) -> Result<(ConfusionMatrix, f64)> {
    let mut head = head.clone();
    let logits = infer(&mut head, &split.features.clone().into_dyn()).mapv(f64::from);
    let cm = ConfusionMatrix::from_predictions(&split.labels, &argmax_rows(logits.view()), n_classes)?;
    let f1 = macro_f1(&cm)?;
    Ok((cm, f1))
}

/// Trains a fresh MLP head on `n_per_class` sampled train windows, with
/// early stopping on validation macro F1. Reads only the train and
/// validation splits.
pub fn fewshot_finetune(data: &FewshotData, n_per_class: usize, seed: u64, hp: &OptimHyper) -> Result<FewshotOutcome> {
    hp.validate("fewshot")?;
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be positive".into()));
    }
    let train = data.train();
    let (sampled, warnings) = sample_per_class(&train.labels, data.n_classes, n_per_class, seed)?;
    for w in &warnings {
        log::warn!("few-shot sampling: {w}");
    }
    let x: Array2<f32> = train.features.select(Axis(0), &sampled);
    let y: Vec<usize> = sampled.iter().map(|&i| train.labels[i]).collect();
    let val = data.val();

    let spec = mlp_head_spec(x.ncols(), data.n_classes)?;
    let mut head = Network::new(&spec, &mut rng_for(seed, "fewshot-head", 0))?;
    let mut opt = AdamW::new(hp.lr, hp.weight_decay);
    let mut dropout = rng_for(seed, "fewshot-dropout", 0);
    let batch = if hp.batch_size == 0 {
        fewshot_batch_size(y.len())
    } else {
        hp.batch_size
    };

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Network)> = None;
    for epoch in 0..hp.max_epochs {
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.shuffle(&mut rng_for(seed, "fewshot-order", epoch as u64));
        let mut total = 0.0;
        let n_steps = order.len().div_ceil(batch);
        for idx in order.chunks(batch) {
            let mut g = Graph::new();
            let bound = head.bind(&mut g, true);
            let xb: ArrayD<f32> = x.select(Axis(0), idx).into_dyn();
            let input = g.constant(xb);
            let logits = head.forward(&mut g, &bound, input, Mode::Train(&mut dropout));
            let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let loss = g.cross_entropy(logits, &yb);
            let value = g.scalar(loss) as f64;
            check_finite("fewshot", &format!("loss at epoch {epoch}"), value)?;
            total += value;
            let grads = g.backward(loss);
            let hg = head.gradients(&bound, &grads);
            opt.step(&mut [(&mut head, hg)]);
        }
        let val_f1 = if val.is_empty() {
            None
        } else {
            Some(evaluate_head(&head, val, data.n_classes)?.1)
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / n_steps.max(1) as f64,
            val_loss: None,
            val_f1,
        });
        let score = val_f1.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((_, b, _)) => val_f1.is_none() || score > *b,
        };
        if improved {
            best = Some((epoch, score, head.clone()));
        } else if let Some((b, ..)) = &best {
            if epoch - b >= hp.patience {
                break;
            }
        }
    }
    let best_epoch = best.as_ref().map(|b| b.0);
    if let Some((_, _, h)) = best {
        head = h;
    }
    Ok(FewshotOutcome {
        head,
        sampled,
        warnings,
        epochs,
        best_epoch,
        encoder_digest: data.encoder_digest.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_size_examples() {
        assert_eq!(fewshot_batch_size(12), 4);
        assert_eq!(fewshot_batch_size(8), 3);
        assert_eq!(fewshot_batch_size(1), 1);
    }

    #[test]
    fn sampling_rules() {
        let labels = vec![0, 0, 0, 1, 1, 2, 2, 2, 2];
        let (idx, warn) = sample_per_class(&labels, 3, 3, 0).unwrap();
        assert_eq!(idx.len(), 8);
        assert_eq!(warn.len(), 1);
        let (a, _) = sample_per_class(&labels, 3, 2, 5).unwrap();
        let (b, _) = sample_per_class(&labels, 3, 2, 5).unwrap();
        assert_eq!(a, b);
        assert!(matches!(sample_per_class(&labels, 4, 2, 0), Err(Error::Fold(_))));
    }
}
