use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output length shrinks by `kernel - 1`.
    Valid,
    /// Zero padding of `kernel / 2` on both sides (odd kernels keep length).
    Same,
}

/// One layer record of a [`ModelGraphSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv1d {
        filters: usize,
        kernel: usize,
        padding: Padding,
    },
    Dense {
        units: usize,
    },
    RecurrentGru {
        hidden: usize,
        layers: usize,
        return_sequences: bool,
    },
    RecurrentLstm {
        hidden: usize,
        layers: usize,
        return_sequences: bool,
    },
    ActivationRelu,
    Dropout {
        rate: f32,
    },
    BatchNorm,
    GlobalMaxPool,
}

/// Feature shape flowing between layers (batch axis implicit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureShape {
    Sequence { steps: usize, channels: usize },
    Vector { dim: usize },
}

impl FeatureShape {
    pub fn width(&self) -> usize {
        match *self {
            FeatureShape::Sequence { channels, .. } => channels,
            FeatureShape::Vector { dim } => dim,
        }
    }
}

impl std::fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureShape::Sequence { steps, channels } => write!(f, "{steps}x{channels}"),
            FeatureShape::Vector { dim } => write!(f, "{dim}"),
        }
    }
}

/// Declarative network description. Construction validates shape
/// propagation end to end, so every value of this type is well formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraphSpec {
    pub name: String,
    pub input_shape: FeatureShape,
    pub layers: Vec<LayerSpec>,
    pub output_dim: usize,
}

fn conv_out_len(steps: usize, kernel: usize, padding: Padding) -> Option<usize> {
    let padded = match padding {
        Padding::Valid => steps,
        Padding::Same => steps + 2 * (kernel / 2),
    };
    (padded >= kernel).then(|| padded - kernel + 1)
}

impl LayerSpec {
    /// Output shape of this layer, or a shape error.
    pub fn propagate(&self, input: FeatureShape) -> Result<FeatureShape> {
        use FeatureShape::*;
        let bad = |why: String| Err(Error::Shape(format!("{self:?} on input {input}: {why}")));
        match (*self, input) {
            (LayerSpec::Conv1d { filters, kernel, padding }, Sequence { steps, .. }) => {
                if kernel == 0 || filters == 0 {
                    return bad("kernel and filters must be positive".into());
                }
                match conv_out_len(steps, kernel, padding) {
                    Some(len) if len > 0 => Ok(Sequence {
                        steps: len,
                        channels: filters,
                    }),
                    _ => bad(format!("{steps} timesteps shorter than kernel {kernel}")),
                }
            }
            (LayerSpec::Conv1d { .. }, Vector { .. }) => bad("conv1d needs a sequence".into()),
            (LayerSpec::Dense { units }, _) if units == 0 => bad("zero units".into()),
            (LayerSpec::Dense { units }, Vector { .. }) => Ok(Vector { dim: units }),
            (LayerSpec::Dense { units }, Sequence { steps, .. }) => Ok(Sequence {
                steps,
                channels: units,
            }),
            (
                LayerSpec::RecurrentGru {
                    hidden,
                    layers,
                    return_sequences,
                }
                | LayerSpec::RecurrentLstm {
                    hidden,
                    layers,
                    return_sequences,
                },
                Sequence { steps, .. },
            ) => {
                if hidden == 0 || layers == 0 {
                    return bad("hidden size and depth must be positive".into());
                }
                Ok(if return_sequences {
                    Sequence {
                        steps,
                        channels: hidden,
                    }
                } else {
                    Vector { dim: hidden }
                })
            }
            (LayerSpec::RecurrentGru { .. } | LayerSpec::RecurrentLstm { .. }, Vector { .. }) => {
                bad("recurrent layer needs a sequence".into())
            }
            (LayerSpec::ActivationRelu, s) => Ok(s),
            (LayerSpec::Dropout { rate }, s) => {
                if (0.0..1.0).contains(&rate) {
                    Ok(s)
                } else {
                    bad(format!("dropout rate {rate} outside [0, 1)"))
                }
            }
            (LayerSpec::BatchNorm, Vector { dim }) => Ok(Vector { dim }),
            (LayerSpec::BatchNorm, Sequence { .. }) => bad("batch-norm expects vectors".into()),
            (LayerSpec::GlobalMaxPool, Sequence { channels, .. }) => Ok(Vector { dim: channels }),
            (LayerSpec::GlobalMaxPool, Vector { .. }) => bad("pooling needs a sequence".into()),
        }
    }

    /// Trainable parameter count given the input width.
    pub fn parameter_count(&self, input: FeatureShape) -> usize {
        let w = input.width();
        match *self {
            LayerSpec::Conv1d { filters, kernel, .. } => kernel * w * filters + filters,
            LayerSpec::Dense { units } => w * units + units,
            LayerSpec::RecurrentGru { hidden, layers, .. } => {
                (0..layers)
                    .map(|l| {
                        let inp = if l == 0 { w } else { hidden };
                        3 * hidden * (inp + hidden) + 6 * hidden
                    })
                    .sum()
            }
            LayerSpec::RecurrentLstm { hidden, layers, .. } => {
                (0..layers)
                    .map(|l| {
                        let inp = if l == 0 { w } else { hidden };
                        4 * hidden * (inp + hidden) + 8 * hidden
                    })
                    .sum()
            }
            LayerSpec::BatchNorm => 2 * w,
            LayerSpec::ActivationRelu | LayerSpec::Dropout { .. } | LayerSpec::GlobalMaxPool => 0,
        }
    }
}

impl ModelGraphSpec {
    pub fn new(name: impl Into<String>, input_shape: FeatureShape, layers: Vec<LayerSpec>) -> Result<Self> {
        let shapes = propagate_all(input_shape, &layers)?;
        let out = *shapes.last().unwrap_or(&input_shape);
        Ok(Self {
            name: name.into(),
            input_shape,
            layers,
            output_dim: out.width(),
        })
    }

    /// Shapes after each layer (same length as `layers`).
    pub fn layer_shapes(&self) -> Result<Vec<FeatureShape>> {
        propagate_all(self.input_shape, &self.layers)
    }

    pub fn output_shape(&self) -> FeatureShape {
        self.layer_shapes()
            .ok()
            .and_then(|s| s.last().copied())
            .unwrap_or(self.input_shape)
    }

    /// Re-checks a spec that came from deserialization.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_shapes()?;
        let out = shapes.last().copied().unwrap_or(self.input_shape);
        if out.width() != self.output_dim {
            return Err(Error::Shape(format!(
                "{}: declared output_dim {} but layers produce {}",
                self.name, self.output_dim, out
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let mut shape = self.input_shape;
        let mut total = 0;
        for layer in &self.layers {
            total += layer.parameter_count(shape);
            shape = layer.propagate(shape).expect("validated at construction");
        }
        total
    }

    /// Stable hash of the architecture (serialized field order is fixed).
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn propagate_all(input: FeatureShape, layers: &[LayerSpec]) -> Result<Vec<FeatureShape>> {
    let mut shape = input;
    layers
        .iter()
        .map(|l| {
            shape = l.propagate(shape)?;
            Ok(shape)
        })
        .collect()
}

/// Three conv blocks (32/64/128 filters, kernels 24/16/8, valid padding),
/// each followed by ReLU and dropout 0.1, then global max pooling.
pub fn conv_encoder_spec(steps: usize, channels: usize) -> Result<ModelGraphSpec> {
    let mut layers = Vec::new();
    for (filters, kernel) in [(32, 24), (64, 16), (128, 8)] {
        layers.push(LayerSpec::Conv1d {
            filters,
            kernel,
            padding: Padding::Valid,
        });
        layers.push(LayerSpec::ActivationRelu);
        layers.push(LayerSpec::Dropout { rate: 0.1 });
    }
    layers.push(LayerSpec::GlobalMaxPool);
    ModelGraphSpec::new("conv-encoder", FeatureShape::Sequence { steps, channels }, layers)
}

pub const MLP_HIDDEN: [usize; 2] = [256, 128];

/// Three dense layers with ReLU, batch-norm and dropout 0.2 between them.
/// The last layer emits raw logits.
pub fn mlp_head_spec(in_dim: usize, n_classes: usize) -> Result<ModelGraphSpec> {
    let mut layers = Vec::new();
    for units in MLP_HIDDEN {
        layers.push(LayerSpec::Dense { units });
        layers.push(LayerSpec::ActivationRelu);
        layers.push(LayerSpec::BatchNorm);
        layers.push(LayerSpec::Dropout { rate: 0.2 });
    }
    layers.push(LayerSpec::Dense { units: n_classes });
    ModelGraphSpec::new("mlp-head", FeatureShape::Vector { dim: in_dim }, layers)
}

/// Dense 256 -> ReLU -> dense 128 -> ReLU -> dense 50.
pub fn projection_head_spec(in_dim: usize) -> Result<ModelGraphSpec> {
    ModelGraphSpec::new(
        "projection-head",
        FeatureShape::Vector { dim: in_dim },
        vec![
            LayerSpec::Dense { units: 256 },
            LayerSpec::ActivationRelu,
            LayerSpec::Dense { units: 128 },
            LayerSpec::ActivationRelu,
            LayerSpec::Dense { units: 50 },
        ],
    )
}

/// Four conv layers of 64 filters (kernel 5) and two LSTM layers of 128
/// units; the last hidden state is the 128-d embedding.
pub fn deepconvlstm_spec(steps: usize, channels: usize) -> Result<ModelGraphSpec> {
    let mut layers = Vec::new();
    for _ in 0..4 {
        layers.push(LayerSpec::Conv1d {
            filters: 64,
            kernel: 5,
            padding: Padding::Valid,
        });
        layers.push(LayerSpec::ActivationRelu);
    }
    layers.push(LayerSpec::Dropout { rate: 0.1 });
    layers.push(LayerSpec::RecurrentLstm {
        hidden: 128,
        layers: 2,
        return_sequences: false,
    });
    ModelGraphSpec::new("deepconvlstm-encoder", FeatureShape::Sequence { steps, channels }, layers)
}

/// Encoder, autoregressor and prediction heads of the CPC baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpcStackSpec {
    /// Per-timestep conv encoder (no pooling), output `steps x latent`.
    pub encoder: ModelGraphSpec,
    /// Two-layer GRU over the latent sequence, output `steps x context`.
    pub autoregressor: ModelGraphSpec,
    pub prediction_steps: usize,
    pub latent_dim: usize,
    pub context_dim: usize,
}

pub const CPC_PREDICTION_STEPS: [usize; 4] = [20, 24, 28, 32];
pub const CPC_CONTEXT_DIM: usize = 256;

pub fn cpc_stack_spec(steps: usize, channels: usize, prediction_steps: usize) -> Result<CpcStackSpec> {
    let mut layers = Vec::new();
    for filters in [32, 64, 128] {
        layers.push(LayerSpec::Conv1d {
            filters,
            kernel: 3,
            padding: Padding::Same,
        });
        layers.push(LayerSpec::ActivationRelu);
        layers.push(LayerSpec::Dropout { rate: 0.2 });
    }
    let encoder = ModelGraphSpec::new("cpc-encoder", FeatureShape::Sequence { steps, channels }, layers)?;
    let latent = encoder.output_shape();
    let autoregressor = ModelGraphSpec::new(
        "cpc-autoregressor",
        latent,
        vec![LayerSpec::RecurrentGru {
            hidden: CPC_CONTEXT_DIM,
            layers: 2,
            return_sequences: true,
        }],
    )?;
    let stack = CpcStackSpec {
        latent_dim: latent.width(),
        context_dim: autoregressor.output_dim,
        encoder,
        autoregressor,
        prediction_steps,
    };
    stack.validate()?;
    Ok(stack)
}

impl CpcStackSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.autoregressor.validate()?;
        let steps = match self.encoder.output_shape() {
            FeatureShape::Sequence { steps, .. } => steps,
            other => return Err(Error::Shape(format!("CPC encoder must keep time axis, got {other}"))),
        };
        if self.autoregressor.input_shape != self.encoder.output_shape() {
            return Err(Error::Shape("CPC autoregressor input does not match encoder output".into()));
        }
        match self.autoregressor.output_shape() {
            FeatureShape::Sequence { channels, .. } if channels == self.context_dim => {}
            other => return Err(Error::Shape(format!("CPC context must be a {}-wide sequence, got {other}", self.context_dim))),
        }
        if self.prediction_steps == 0 || self.prediction_steps >= steps {
            return Err(Error::Shape(format!(
                "{} prediction steps do not fit in {steps} timesteps",
                self.prediction_steps
            )));
        }
        Ok(())
    }

    /// Parameter count including the `prediction_steps` linear heads.
    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count()
            + self.autoregressor.parameter_count()
            + self.prediction_steps * (self.context_dim * self.latent_dim + self.latent_dim)
    }

    /// Downstream encoder: the CPC conv stack followed by global max
    /// pooling, sharing parameter names with [`Self::encoder`].
    pub fn pooled_encoder(&self) -> Result<ModelGraphSpec> {
        let mut layers = self.encoder.layers.clone();
        layers.push(LayerSpec::GlobalMaxPool);
        ModelGraphSpec::new("cpc-encoder-pooled", self.encoder.input_shape, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_encoder_produces_128_features() {
        let spec = conv_encoder_spec(50, 3).unwrap();
        assert_eq!(spec.output_dim, 128);
        let shapes = spec.layer_shapes().unwrap();
        // 50 -> 27 -> 12 -> 5 timesteps under valid padding.
        assert_eq!(shapes[0], FeatureShape::Sequence { steps: 27, channels: 32 });
        assert_eq!(shapes[3], FeatureShape::Sequence { steps: 12, channels: 64 });
        assert_eq!(shapes[6], FeatureShape::Sequence { steps: 5, channels: 128 });
    }

    #[test]
    fn conv_encoder_rejects_short_windows() {
        // Shape oracle: valid conv needs steps >= kernel at every block;
        // 10 < 24 fails at the first block, 30 -> 7 fails at the second.
        assert!(matches!(conv_encoder_spec(10, 3), Err(Error::Shape(_))));
        assert!(matches!(conv_encoder_spec(30, 3), Err(Error::Shape(_))));
        // Smallest valid length: (((t-23)-15)-7) >= 1 -> t >= 46.
        assert!(conv_encoder_spec(45, 3).is_err());
        assert!(conv_encoder_spec(46, 3).is_ok());
    }

    #[test]
    fn heads_have_expected_widths() {
        assert_eq!(mlp_head_spec(128, 11).unwrap().output_dim, 11);
        assert_eq!(mlp_head_spec(128, 6).unwrap().output_dim, 6);
        assert_eq!(projection_head_spec(128).unwrap().output_dim, 50);
    }

    #[test]
    fn deepconvlstm_is_a_drop_in_encoder() {
        let spec = deepconvlstm_spec(50, 3).unwrap();
        assert_eq!(spec.output_shape(), FeatureShape::Vector { dim: 128 });
        let head = mlp_head_spec(spec.output_dim, 6).unwrap();
        assert_eq!(head.input_shape, spec.output_shape());
        // 50 - 4*4 = 34 timesteps enter the LSTM.
        assert_eq!(spec.layer_shapes().unwrap()[7], FeatureShape::Sequence { steps: 34, channels: 64 });
    }

    #[test]
    fn cpc_stack_heads_and_shapes() {
        let stack = cpc_stack_spec(50, 3, 28).unwrap();
        assert_eq!(stack.prediction_steps, 28);
        assert_eq!(stack.encoder.output_shape(), FeatureShape::Sequence { steps: 50, channels: 128 });
        assert_eq!(stack.autoregressor.output_shape(), FeatureShape::Sequence { steps: 50, channels: 256 });
        assert!(cpc_stack_spec(50, 3, 50).is_err());
        assert_eq!(stack.pooled_encoder().unwrap().output_dim, 128);
    }

    #[test]
    fn parameter_counts_are_pinned() {
        // Hand-computed: conv 24*3*32+32, 16*32*64+64, 8*64*128+128.
        let conv = conv_encoder_spec(50, 3).unwrap();
        assert_eq!(conv.parameter_count(), 2336 + 32832 + 65664);
        // dense 128*256+256, bn 512, 256*128+128, bn 256, 128*6+6
        let head = mlp_head_spec(128, 6).unwrap();
        assert_eq!(head.parameter_count(), 33024 + 512 + 32896 + 256 + 774);
        let proj = projection_head_spec(128).unwrap();
        assert_eq!(proj.parameter_count(), 33024 + 32896 + 6450);
        // GRU layer: 3H(in+H) + 6H
        let gru = LayerSpec::RecurrentGru { hidden: 4, layers: 1, return_sequences: true };
        assert_eq!(gru.parameter_count(FeatureShape::Sequence { steps: 3, channels: 2 }), 3 * 4 * 6 + 24);
    }

    #[test]
    fn specs_round_trip_through_json() {
        for spec in [
            conv_encoder_spec(50, 3).unwrap(),
            mlp_head_spec(128, 4).unwrap(),
            projection_head_spec(128).unwrap(),
            deepconvlstm_spec(50, 3).unwrap(),
        ] {
            let text = serde_json::to_string(&spec).unwrap();
            let back: ModelGraphSpec = serde_json::from_str(&text).unwrap();
            back.validate().unwrap();
            assert_eq!(back, spec);
            assert_eq!(back.fingerprint(), spec.fingerprint());
        }
        let cpc = cpc_stack_spec(50, 3, 24).unwrap();
        let back: CpcStackSpec = serde_json::from_str(&serde_json::to_string(&cpc).unwrap()).unwrap();
        assert_eq!(back, cpc);
    }

    #[test]
    fn tampered_output_dim_fails_validation() {
        let mut spec = mlp_head_spec(128, 4).unwrap();
        spec.output_dim = 5;
        assert!(spec.validate().is_err());
    }
}
