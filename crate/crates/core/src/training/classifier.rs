use ndarray::{Array2, ArrayD, Axis, IxDyn};

use crate::data::types::SensorWindow;
use crate::error::{Error, Result};
use crate::evaluation::metrics::{macro_f1, ConfusionMatrix};
use crate::models::spec::mlp_head_spec;
use crate::models::{Checkpoint, Stage};
use crate::nn::{Graph, Mode, Network};
use crate::rng::Rng;
use crate::training::losses::{argmax_rows, cross_entropy, to_f64};
use crate::training::EncoderKind;

/// Windows per forward pass during inference.
const EVAL_CHUNK: usize = 512;

/// Stacks windows into a `[n, steps, channels]` tensor.
pub fn batch_tensor(windows: &[&SensorWindow]) -> ArrayD<f32> {
    let (t, c) = windows.first().map(|w| (w.steps(), w.channels())).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(windows.len() * t * c);
    for w in windows {
        data.extend(w.samples.iter().copied());
    }
    ArrayD::from_shape_vec(IxDyn(&[windows.len(), t, c]), data).expect("windows share one shape")
}

/// Runs `net` in evaluation mode over `input` rows in chunks.
pub fn infer(net: &mut Network, input: &ArrayD<f32>) -> Array2<f32> {
    let n = input.shape()[0];
    let mut out = Array2::<f32>::zeros((n, net.output_dim()));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let mut g = Graph::new();
        let bound = net.bind(&mut g, false);
        let x = g.constant(input.slice_axis(Axis(0), (start..end).into()).to_owned());
        let y = net.forward(&mut g, &bound, x, Mode::Eval);
        let v = g.value(y).view().into_dimensionality::<ndarray::Ix2>().expect("matrix output");
        out.slice_mut(ndarray::s![start..end, ..]).assign(&v);
        start = end;
    }
    out
}

/// Frozen-encoder embeddings of windows.
pub fn embed(encoder: &mut Network, windows: &[&SensorWindow]) -> Array2<f32> {
    if windows.is_empty() {
        return Array2::zeros((0, encoder.output_dim()));
    }
    infer(encoder, &batch_tensor(windows))
}

/// Encoder plus classification head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub encoder: Network,
    pub head: Network,
}

impl Classifier {
    pub fn new(kind: EncoderKind, steps: usize, channels: usize, n_classes: usize, rng: &mut Rng) -> Result<Self> {
        let enc_spec = kind.spec(steps, channels)?;
        let head_spec = mlp_head_spec(enc_spec.output_dim, n_classes)?;
        Ok(Self {
            encoder: Network::new(&enc_spec, rng)?,
            head: Network::new(&head_spec, rng)?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            encoder: ck.instantiate("encoder")?,
            head: ck.instantiate("head")?,
        })
    }

    pub fn checkpoint(&self, stage: Stage, seed: u64, config_hash: &str) -> Checkpoint {
        Checkpoint::new(stage, seed, config_hash)
            .with("encoder", &self.encoder)
            .with("head", &self.head)
    }

    pub fn n_classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn logits(&mut self, windows: &[&SensorWindow]) -> Array2<f32> {
        if windows.is_empty() {
            return Array2::zeros((0, self.n_classes()));
        }
        let emb = embed(&mut self.encoder, windows);
        infer(&mut self.head, &emb.into_dyn())
    }

    /// Mean cross-entropy and macro F1 on labeled windows.
    pub fn evaluate(&mut self, windows: &[&SensorWindow]) -> Result<(f64, f64)> {
        let labels = labels_of(windows)?;
        let logits = to_f64(&self.logits(windows).into_dyn())?;
        let loss = cross_entropy(logits.view(), &labels)?.value;
        let cm = ConfusionMatrix::from_predictions(&labels, &argmax_rows(logits.view()), self.n_classes())?;
        Ok((loss, macro_f1(&cm)?))
    }
}

pub(crate) fn labels_of(windows: &[&SensorWindow]) -> Result<Vec<usize>> {
    windows
        .iter()
        .map(|w| {
            w.label
                .ok_or_else(|| Error::Training(format!("unlabeled window of user {} in a labeled split", w.user)))
        })
        .collect()
}
