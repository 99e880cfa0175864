//! Comparison methods: naive transfer, the end-to-end conv classifier and
//! the two self-supervised pre-training schemes.

use std::time::Instant;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{simclr_views_in, source_suite};
use crate::data::types::{DatasetBundle, FoldSpec, SensorWindow, Split};
use crate::error::{Error, Result};
use crate::models::spec::{projection_head_spec, CpcStackSpec, FeatureShape, LayerSpec, ModelGraphSpec};
use crate::models::{Checkpoint, Stage};
use crate::nn::{AdamW, Graph, Mode, Network};
use crate::rng::{derive_seed, rng_for};
use crate::training::classifier::{batch_tensor, labels_of, Classifier};
use crate::training::fewshot::{fewshot_batch_size, sample_per_class};
use crate::training::fit::{train_classifier, train_teacher};
use crate::training::losses::{nt_xent, to_f64};
use crate::training::{check_finite, EncoderKind, EpochRecord, OptimHyper, RunContext, StageResult};

/// Initial classifier for a seed; the teacher and naive transfer share it.
pub fn init_classifier(kind: EncoderKind, shape: (usize, usize), n_classes: usize, seed: u64) -> Result<Classifier> {
    Classifier::new(kind, shape.0, shape.1, n_classes, &mut rng_for(seed, "classifier-init", 0))
}

/// Supervised source training whose encoder is used as-is downstream.
/// With the teacher's seed and hyperparameters this reproduces the
/// teacher exactly.
pub fn naive_transfer(
    kind: EncoderKind,
    train: &[SensorWindow],
    val: &[SensorWindow],
    n_classes: usize,
    hp: &OptimHyper,
    ctx: &RunContext,
) -> Result<(Classifier, StageResult)> {
    let shape = window_shape(train)?;
    train_teacher(init_classifier(kind, shape, n_classes, ctx.seed)?, train, val, hp, ctx)
}

fn window_shape(windows: &[SensorWindow]) -> Result<(usize, usize)> {
    windows
        .first()
        .map(|w| (w.steps(), w.channels()))
        .ok_or_else(|| Error::Training("no windows to infer the input shape from".into()))
}

/// Encoder and head trained from scratch on `n_per_class` windows of the
/// fold's train split. Returns the model and the sampled window indices.
pub fn train_conv_classifier(
    kind: EncoderKind,
    target: &DatasetBundle,
    fold: &FoldSpec,
    n_per_class: usize,
    hp: &OptimHyper,
    ctx: &RunContext,
) -> Result<(Classifier, StageResult, Vec<usize>)> {
    let train = target.split_windows(fold, Split::Train);
    let labeled: Vec<SensorWindow> = train.into_iter().filter(|w| w.label.is_some()).collect();
    let labels = labels_of(&labeled.iter().collect::<Vec<_>>())?;
    let (sampled, warnings) = sample_per_class(&labels, target.n_classes(), n_per_class, ctx.seed)?;
    for w in warnings {
        log::warn!("conv classifier sampling: {w}");
    }
    let picked: Vec<SensorWindow> = sampled.iter().map(|&i| labeled[i].clone()).collect();
    let val = target.split_windows(fold, Split::Val);
    let mut hp = *hp;
    if hp.batch_size == 0 {
        hp.batch_size = fewshot_batch_size(picked.len());
    }
    let shape = window_shape(&picked)?;
    let init = init_classifier(kind, shape, target.n_classes(), derive_seed(ctx.seed, "conv-classifier", 0))?;
    let (model, result) = train_classifier(Stage::Fewshot, init, &picked, &val, &hp, ctx)?;
    Ok((model, result, sampled))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimclrHyper {
    pub optim: OptimHyper,
    pub temperature: f64,
}

impl Default for SimclrHyper {
    fn default() -> Self {
        Self {
            optim: OptimHyper {
                lr: 1e-3,
                weight_decay: 1e-5,
                batch_size: 1024,
                max_epochs: 100,
                patience: 15,
            },
            temperature: 0.1,
        }
    }
}

/// Contrastive pre-training of an encoder and projection head on raw
/// (not pre-augmented) windows, with views from the eight-transform pool.
/// Training runs for the full epoch budget; the final weights are kept.
pub fn pretrain_simclr(kind: EncoderKind, windows: &[SensorWindow], hp: &SimclrHyper, ctx: &RunContext) -> Result<StageResult> {
    hp.optim.validate("simclr")?;
    let start = Instant::now();
    let shape = window_shape(windows)?;
    if windows.len() < 2 {
        return Err(Error::Training("contrastive pre-training needs at least two windows".into()));
    }
    let mut init = rng_for(ctx.seed, "simclr-init", 0);
    let mut encoder = Network::new(&kind.spec(shape.0, shape.1)?, &mut init)?;
    let mut projection = Network::new(&projection_head_spec(encoder.output_dim())?, &mut init)?;
    let mut opt = AdamW::new(hp.optim.lr, hp.optim.weight_decay);
    let mut dropout = rng_for(ctx.seed, "simclr-dropout", 0);
    let pool = source_suite();
    let batch = hp.optim.batch_size.max(2);
    let mut epochs = Vec::new();
    let mut drawn = 0u64;
    for epoch in 0..hp.optim.max_epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng_for(ctx.seed, "simclr-order", epoch as u64));
        let mut total = 0.0;
        let mut n_steps = 0;
        for idx in order.chunks(batch).filter(|c| c.len() >= 2) {
            let mut views = Vec::with_capacity(2 * idx.len());
            for &i in idx {
                drawn += 1;
                let (a, b) = simclr_views_in(&pool, &windows[i], derive_seed(ctx.seed, "simclr-views", drawn))?;
                views.push(a);
                views.push(b);
            }
            let mut g = Graph::new();
            let eb = encoder.bind(&mut g, true);
            let pb = projection.bind(&mut g, true);
            let x = g.constant(batch_tensor(&views.iter().collect::<Vec<_>>()));
            let z = encoder.forward(&mut g, &eb, x, Mode::Train(&mut dropout));
            let p = projection.forward(&mut g, &pb, z, Mode::Train(&mut dropout));
            let loss = nt_xent(to_f64(g.value(p))?.view(), hp.temperature)?;
            check_finite("simclr", &format!("loss at epoch {epoch}"), loss.value)?;
            let grad: ArrayD<f32> = loss.grad.mapv(|v| v as f32).into_dyn();
            let root = g.external_scalar(loss.value as f32, vec![(p, grad)]);
            let grads = g.backward(root);
            let eg = encoder.gradients(&eb, &grads);
            let pg = projection.gradients(&pb, &grads);
            opt.step(&mut [(&mut encoder, eg), (&mut projection, pg)]);
            total += loss.value;
            n_steps += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / n_steps.max(1) as f64,
            val_loss: None,
            val_f1: None,
        });
    }
    let checkpoint = Checkpoint::new(Stage::Pretrain, ctx.seed, &ctx.config_hash)
        .with("encoder", &encoder)
        .with("projection", &projection);
    Ok(StageResult {
        checkpoint,
        best_epoch: epochs.last().map(|e| e.epoch),
        epochs,
        steps: Vec::new(),
        best_val_f1: None,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: ctx.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpcHyper {
    pub optim: OptimHyper,
    pub prediction_steps: usize,
}

impl Default for CpcHyper {
    fn default() -> Self {
        Self {
            optim: OptimHyper {
                lr: 5e-4,
                weight_decay: 0.0,
                batch_size: 64,
                max_epochs: 100,
                patience: 15,
            },
            prediction_steps: 28,
        }
    }
}

fn predictor_spec(context: usize, latent: usize) -> Result<ModelGraphSpec> {
    ModelGraphSpec::new(
        "cpc-predictor",
        FeatureShape::Vector { dim: context },
        vec![LayerSpec::Dense { units: latent }],
    )
}

/// Contrastive predictive coding: the autoregressor summarizes latents up
/// to a random step `t`, and head `k` must pick `z[t+k]` out of the batch.
pub fn pretrain_cpc(stack: &CpcStackSpec, windows: &[SensorWindow], hp: &CpcHyper, ctx: &RunContext) -> Result<StageResult> {
    hp.optim.validate("cpc")?;
    stack.validate()?;
    if hp.prediction_steps != stack.prediction_steps {
        return Err(Error::Config(format!(
            "CPC stack built for {} prediction steps, hyperparameters ask for {}",
            stack.prediction_steps, hp.prediction_steps
        )));
    }
    let start = Instant::now();
    let steps = match stack.encoder.output_shape() {
        FeatureShape::Sequence { steps, .. } => steps,
        FeatureShape::Vector { .. } => unreachable!("validated"),
    };
    let k_max = stack.prediction_steps;
    let mut init = rng_for(ctx.seed, "cpc-init", 0);
    let mut encoder = Network::new(&stack.encoder, &mut init)?;
    let mut ar = Network::new(&stack.autoregressor, &mut init)?;
    let pspec = predictor_spec(stack.context_dim, stack.latent_dim)?;
    let mut predictors: Vec<Network> = (0..k_max)
        .map(|_| Network::new(&pspec, &mut init))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(hp.optim.lr, hp.optim.weight_decay);
    let mut rng = rng_for(ctx.seed, "cpc-train", 0);
    let batch = hp.optim.batch_size.max(2);
    let mut epochs = Vec::new();
    for epoch in 0..hp.optim.max_epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng_for(ctx.seed, "cpc-order", epoch as u64));
        let mut total = 0.0;
        let mut n_steps = 0;
        for idx in order.chunks(batch).filter(|c| c.len() >= 2) {
            let t = rng.random_range(0..steps - k_max);
            let refs: Vec<&SensorWindow> = idx.iter().map(|&i| &windows[i]).collect();
            let mut g = Graph::new();
            let eb = encoder.bind(&mut g, true);
            let ab = ar.bind(&mut g, true);
            let pbs: Vec<_> = predictors.iter().map(|p| p.bind(&mut g, true)).collect();
            let x = g.constant(batch_tensor(&refs));
            let z = encoder.forward(&mut g, &eb, x, Mode::Train(&mut rng));
            let prefix: Vec<_> = (0..=t).map(|s| g.slice_time(z, s)).collect();
            let zin = g.stack_time(&prefix);
            let c_seq = ar.forward(&mut g, &ab, zin, Mode::Train(&mut rng));
            let c_t = g.slice_time(c_seq, t);
            let targets: Vec<usize> = (0..idx.len()).collect();
            let mut terms = Vec::with_capacity(k_max);
            for (k, (pred, pb)) in predictors.iter_mut().zip(&pbs).enumerate() {
                let guess = pred.forward(&mut g, pb, c_t, Mode::Train(&mut rng));
                let future = g.slice_time(z, t + k + 1);
                let ft = g.transpose(future);
                let scores = g.matmul(guess, ft);
                terms.push((g.cross_entropy(scores, &targets), 1.0 / k_max as f32));
            }
            let loss = g.weighted_sum(&terms);
            let value = g.scalar(loss) as f64;
            check_finite("cpc", &format!("loss at epoch {epoch}"), value)?;
            let grads = g.backward(loss);
            let eg = encoder.gradients(&eb, &grads);
            let ag = ar.gradients(&ab, &grads);
            let pgs: Vec<_> = predictors.iter().zip(&pbs).map(|(p, b)| p.gradients(b, &grads)).collect();
            let mut groups: Vec<(&mut Network, Vec<Option<ArrayD<f32>>>)> = vec![(&mut encoder, eg), (&mut ar, ag)];
            for (p, pg) in predictors.iter_mut().zip(pgs) {
                groups.push((p, pg));
            }
            opt.step(&mut groups);
            total += value;
            n_steps += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / n_steps.max(1) as f64,
            val_loss: None,
            val_f1: None,
        });
    }
    let mut checkpoint = Checkpoint::new(Stage::Pretrain, ctx.seed, &ctx.config_hash)
        .with("encoder", &encoder)
        .with("autoregressor", &ar);
    for (k, p) in predictors.iter().enumerate() {
        checkpoint = checkpoint.with(&format!("predictor.{k}"), p);
    }
    Ok(StageResult {
        checkpoint,
        best_epoch: epochs.last().map(|e| e.epoch),
        epochs,
        steps: Vec::new(),
        best_val_f1: None,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: ctx.seed,
    })
}

/// The encoder a checkpoint offers for downstream use. A sequence encoder
/// (the CPC stack) is wrapped with global max pooling.
pub fn downstream_encoder(ck: &Checkpoint) -> Result<Network> {
    let enc = ck.instantiate("encoder")?;
    match enc.spec().output_shape() {
        FeatureShape::Vector { .. } => Ok(enc),
        FeatureShape::Sequence { .. } => {
            let mut layers = enc.spec().layers.clone();
            layers.push(LayerSpec::GlobalMaxPool);
            let spec = ModelGraphSpec::new(format!("{}-pooled", enc.spec().name), enc.spec().input_shape, layers)?;
            let mut pooled = Network::new(&spec, &mut rng_for(0, "pooled", 0))?;
            let copied = pooled.copy_matching_from(&enc);
            if copied != pooled.params().len() {
                return Err(Error::Checkpoint("pooled encoder did not receive every weight".into()));
            }
            Ok(pooled)
        }
    }
}
