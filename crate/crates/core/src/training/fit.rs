//! The supervised training loop shared by the teacher and the student.
//!
//! The source cross-entropy term draws its batch order and dropout masks
//! from dedicated random streams, and target terms with a zero weight are
//! never evaluated. A student run with both weights at zero therefore
//! replays teacher-style training step for step.

use std::time::Instant;

use ndarray::ArrayD;
use rand::seq::SliceRandom;

use crate::augment::{apply, simclr_views_in, AugmentationSpec};
use crate::data::types::SensorWindow;
use crate::error::{Error, Result};
use crate::models::spec::projection_head_spec;
use crate::models::Stage;
use crate::nn::{AdamW, Graph, Mode, Network};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::training::classifier::{batch_tensor, labels_of, Classifier};
use crate::training::losses::{kl_consistency, nt_xent, to_f64};
use crate::training::pseudo::PseudoLabelSet;
use crate::training::{check_finite, EpochRecord, LossWeights, OptimHyper, RunContext, StageResult, StepRecord};

/// Target-side inputs of the student objective.
#[derive(Debug, Clone)]
pub struct StudentInputs<'a> {
    /// Unlabeled target windows; pseudo-label entries index into these.
    pub target: &'a [SensorWindow],
    pub pseudo: &'a PseudoLabelSet,
    pub weights: LossWeights,
    /// Perturbation applied before the consistency term.
    pub strong: AugmentationSpec,
    /// Transforms the contrastive views are drawn from.
    pub view_pool: Vec<AugmentationSpec>,
}

/// Trains `init` with cross-entropy on `train`, keeping the epoch with the
/// best validation macro F1 (lower validation loss breaks ties).
pub fn train_teacher(
    init: Classifier,
    train: &[SensorWindow],
    val: &[SensorWindow],
    hp: &OptimHyper,
    ctx: &RunContext,
) -> Result<(Classifier, StageResult)> {
    train_classifier(Stage::Teacher, init, train, val, hp, ctx)
}

pub(crate) fn train_classifier(
    stage: Stage,
    init: Classifier,
    train: &[SensorWindow],
    val: &[SensorWindow],
    hp: &OptimHyper,
    ctx: &RunContext,
) -> Result<(Classifier, StageResult)> {
    let mut model = init;
    let out = run(stage, &mut model, None, train, val, None, hp, ctx.seed)?;
    let checkpoint = model.checkpoint(stage, ctx.seed, &ctx.config_hash);
    Ok((model, out.into_result(checkpoint, ctx.seed)))
}

/// Student training initialized from the teacher; the returned checkpoint
/// also carries the projection head under `projection`.
pub fn train_student(
    teacher: &Classifier,
    source_train: &[SensorWindow],
    source_val: &[SensorWindow],
    inputs: &StudentInputs<'_>,
    hp: &OptimHyper,
    ctx: &RunContext,
) -> Result<(Classifier, StageResult)> {
    let w = inputs.weights;
    if w.lambda1 < 0.0 || w.lambda2 < 0.0 {
        return Err(Error::Config("loss weights must be >= 0".into()));
    }
    if w.lambda1 > 0.0 && inputs.pseudo.entries.is_empty() {
        return Err(Error::Training(format!(
            "no target window passed the pseudo-label threshold {}; lower the threshold",
            inputs.pseudo.threshold
        )));
    }
    if w.lambda2 > 0.0 && inputs.target.len() < 2 {
        return Err(Error::Training("contrastive term needs at least two target windows".into()));
    }
    if inputs.pseudo.n_classes != teacher.n_classes() {
        return Err(Error::Training(format!(
            "pseudo-labels cover {} classes but the teacher predicts {}",
            inputs.pseudo.n_classes,
            teacher.n_classes()
        )));
    }
    let mut model = teacher.clone();
    let proj_spec = projection_head_spec(model.encoder.output_dim())?;
    let mut projection = Network::new(&proj_spec, &mut rng_for(ctx.seed, "projection-init", 0))?;
    let out = run(
        Stage::Student,
        &mut model,
        Some(&mut projection),
        source_train,
        source_val,
        Some(inputs),
        hp,
        ctx.seed,
    )?;
    let checkpoint = model
        .checkpoint(Stage::Student, ctx.seed, &ctx.config_hash)
        .with("projection", &projection);
    Ok((model, out.into_result(checkpoint, ctx.seed)))
}

struct FitOutcome {
    epochs: Vec<EpochRecord>,
    steps: Vec<StepRecord>,
    best_epoch: Option<usize>,
    best_val_f1: Option<f64>,
    wall_time_s: f64,
}

impl FitOutcome {
    fn into_result(self, checkpoint: crate::models::Checkpoint, seed: u64) -> StageResult {
        StageResult {
            checkpoint,
            epochs: self.epochs,
            steps: self.steps,
            best_epoch: self.best_epoch,
            best_val_f1: self.best_val_f1,
            wall_time_s: self.wall_time_s,
            seed,
        }
    }
}

/// Endless shuffled stream of indices, reshuffled on every pass.
struct Cycler {
    items: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    cycle: u64,
    seed: u64,
    tag: &'static str,
}

impl Cycler {
    fn new(items: Vec<usize>, seed: u64, tag: &'static str) -> Self {
        let mut c = Self {
            items,
            order: Vec::new(),
            pos: 0,
            cycle: 0,
            seed,
            tag,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order = self.items.clone();
        self.order.shuffle(&mut rng_for(self.seed, self.tag, self.cycle));
        self.cycle += 1;
        self.pos = 0;
    }

    fn next(&mut self, n: usize) -> Vec<usize> {
        let n = n.min(self.items.len());
        if self.pos + n > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + n].to_vec();
        self.pos += n;
        out
    }
}

struct TargetState<'a> {
    inputs: &'a StudentInputs<'a>,
    pseudo: Cycler,
    views: Cycler,
    dropout: Rng,
    drawn: u64,
}

#[allow(clippy::too_many_arguments)]
fn run(
    stage: Stage,
    model: &mut Classifier,
    mut projection: Option<&mut Network>,
    train: &[SensorWindow],
    val: &[SensorWindow],
    student: Option<&StudentInputs<'_>>,
    hp: &OptimHyper,
    seed: u64,
) -> Result<FitOutcome> {
    hp.validate(&stage.to_string())?;
    let start = Instant::now();
    let stage_name = stage.to_string();
    if hp.max_epochs > 0 && train.is_empty() {
        return Err(Error::Training(format!("{stage_name}: empty training split")));
    }
    let batch = hp.batch_size.max(1);
    let labels = labels_of(&train.iter().collect::<Vec<_>>())?;
    let val_refs: Vec<&SensorWindow> = val.iter().collect();
    let mut opt = AdamW::new(hp.lr, hp.weight_decay);
    let mut source_dropout = rng_for(seed, "source-dropout", 0);
    let mut target = student.map(|inputs| TargetState {
        inputs,
        pseudo: Cycler::new((0..inputs.pseudo.entries.len()).collect(), seed, "pseudo-order"),
        views: Cycler::new((0..inputs.target.len()).collect(), seed, "view-order"),
        dropout: rng_for(seed, "target-dropout", 0),
        drawn: 0,
    });

    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    // Ranked by validation F1, ties broken by lower validation loss.
    let mut best: Option<(usize, (f64, f64), Classifier, Option<Network>)> = None;
    for epoch in 0..hp.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(seed, "source-order", epoch as u64));
        let mut epoch_loss = 0.0;
        let n_steps = order.len().div_ceil(batch);
        for (step, idx) in order.chunks(batch).enumerate() {
            let mut g = Graph::new();
            let enc = model.encoder.bind(&mut g, true);
            let head = model.head.bind(&mut g, true);
            let proj = projection.as_deref().map(|p| p.bind(&mut g, true));

            let windows: Vec<&SensorWindow> = idx.iter().map(|&i| &train[i]).collect();
            let x = g.constant(batch_tensor(&windows));
            let z = model.encoder.forward(&mut g, &enc, x, Mode::Train(&mut source_dropout));
            let logits = model.head.forward(&mut g, &head, z, Mode::Train(&mut source_dropout));
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let ce = g.cross_entropy(logits, &ys);
            let mut terms = vec![(ce, 1.0f32)];
            let mut record = StepRecord {
                epoch,
                step,
                total: 0.0,
                ce: g.scalar(ce) as f64,
                kl: None,
                simclr: None,
            };

            if let Some(t) = target.as_mut() {
                let w = t.inputs.weights;
                if w.lambda1 > 0.0 {
                    let picks = t.pseudo.next(batch);
                    let strong: Vec<SensorWindow> = picks
                        .iter()
                        .map(|&p| {
                            let e = &t.inputs.pseudo.entries[p];
                            t.drawn += 1;
                            apply(&t.inputs.strong, &t.inputs.target[e.index], derive_seed(seed, "strong", t.drawn))
                        })
                        .collect::<Result<_>>()?;
                    let refs: Vec<&SensorWindow> = strong.iter().collect();
                    let xs = g.constant(batch_tensor(&refs));
                    let zs = model.encoder.forward(&mut g, &enc, xs, Mode::Train(&mut t.dropout));
                    let ls = model.head.forward(&mut g, &head, zs, Mode::Train(&mut t.dropout));
                    let probs = ndarray::Array2::from_shape_fn((picks.len(), t.inputs.pseudo.n_classes), |(r, c)| {
                        t.inputs.pseudo.entries[picks[r]].probs[c]
                    });
                    let loss = kl_consistency(to_f64(g.value(ls))?.view(), probs.view(), w.kl_direction)?;
                    let grad: ArrayD<f32> = loss.grad.mapv(|v| v as f32).into_dyn();
                    let node = g.external_scalar(loss.value as f32, vec![(ls, grad)]);
                    terms.push((node, w.lambda1 as f32));
                    record.kl = Some(loss.value);
                }
                if w.lambda2 > 0.0 {
                    let proj_net = projection
                        .as_deref_mut()
                        .ok_or_else(|| Error::Training("contrastive term without a projection head".into()))?;
                    let picks = t.views.next(batch.max(2));
                    let mut views = Vec::with_capacity(2 * picks.len());
                    for &p in &picks {
                        t.drawn += 1;
                        let (a, b) = simclr_views_in(&t.inputs.view_pool, &t.inputs.target[p], derive_seed(seed, "views", t.drawn))?;
                        views.push(a);
                        views.push(b);
                    }
                    let refs: Vec<&SensorWindow> = views.iter().collect();
                    let xv = g.constant(batch_tensor(&refs));
                    let zv = model.encoder.forward(&mut g, &enc, xv, Mode::Train(&mut t.dropout));
                    let pv = proj_net.forward(&mut g, proj.as_ref().expect("bound with network"), zv, Mode::Train(&mut t.dropout));
                    let loss = nt_xent(to_f64(g.value(pv))?.view(), w.temperature)?;
                    let grad: ArrayD<f32> = loss.grad.mapv(|v| v as f32).into_dyn();
                    let node = g.external_scalar(loss.value as f32, vec![(pv, grad)]);
                    terms.push((node, w.lambda2 as f32));
                    record.simclr = Some(loss.value);
                }
            }

            let total = g.weighted_sum(&terms);
            record.total = g.scalar(total) as f64;
            check_finite(&stage_name, &format!("loss at epoch {epoch} step {step}"), record.total)?;
            let grads = g.backward(total);
            let enc_g = model.encoder.gradients(&enc, &grads);
            let head_g = model.head.gradients(&head, &grads);
            match (projection.as_deref_mut(), proj.as_ref()) {
                (Some(p), Some(pb)) => {
                    let proj_g = p.gradients(pb, &grads);
                    opt.step(&mut [(&mut model.encoder, enc_g), (&mut model.head, head_g), (p, proj_g)]);
                }
                _ => opt.step(&mut [(&mut model.encoder, enc_g), (&mut model.head, head_g)]),
            }
            epoch_loss += record.total;
            steps.push(record);
        }
        if !model.encoder.is_finite() || !model.head.is_finite() {
            return Err(Error::NonFinite {
                stage: stage_name,
                detail: format!("weights after epoch {epoch}"),
            });
        }
        let (val_loss, val_f1) = if val.is_empty() {
            (None, None)
        } else {
            let (l, f) = model.evaluate(&val_refs)?;
            (Some(l), Some(f))
        };
        let train_loss = epoch_loss / n_steps.max(1) as f64;
        log::debug!("{stage_name} epoch {epoch}: train {train_loss:.4} val_f1 {val_f1:?}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_f1,
        });
        let score = (
            val_f1.unwrap_or(f64::NEG_INFINITY),
            val_loss.map_or(f64::NEG_INFINITY, |l| -l),
        );
        let improved = match &best {
            None => true,
            Some((_, b, _, _)) => val_f1.is_none() || score > *b,
        };
        if improved {
            best = Some((epoch, score, model.clone(), projection.as_deref().cloned()));
        } else if let Some((b, ..)) = &best {
            if epoch - b >= hp.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_f1) = match best {
        Some((e, score, m, p)) => {
            *model = m;
            if let (Some(dst), Some(src)) = (projection.as_deref_mut(), p) {
                *dst = src;
            }
            (Some(e), score.0.is_finite().then_some(score.0))
        }
        None => (None, None),
    };
    Ok(FitOutcome {
        epochs,
        steps,
        best_epoch,
        best_val_f1,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
