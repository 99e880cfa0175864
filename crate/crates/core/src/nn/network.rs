//! Executable networks instantiated from a [`ModelGraphSpec`].

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::spec::{LayerSpec, ModelGraphSpec, Padding};
use crate::nn::graph::{Graph, Var};
use crate::rng::Rng;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// Forward-pass mode. Training draws dropout masks and uses batch
/// statistics; evaluation is deterministic and uses running statistics.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone)]
enum LayerPlan {
    Conv { w: usize, b: usize, kernel: usize, pad: usize },
    Dense { w: usize, b: usize },
    Gru { cells: Vec<[usize; 4]>, hidden: usize, return_sequences: bool },
    Lstm { cells: Vec<[usize; 4]>, hidden: usize, return_sequences: bool },
    Relu,
    Dropout(f32),
    BatchNorm { gamma: usize, beta: usize, stats: usize },
    MaxPool,
}

#[derive(Debug, Clone)]
struct RunningStats {
    mean: Array1<f32>,
    var: Array1<f32>,
}

/// Weights, buffers and execution plan for one spec.
#[derive(Debug, Clone)]
pub struct Network {
    spec: ModelGraphSpec,
    names: Vec<String>,
    params: Vec<ArrayD<f32>>,
    running: Vec<RunningStats>,
    plan: Vec<LayerPlan>,
}

/// Parameters of one network placed on a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f32) -> ArrayD<f32> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..=bound))
}

impl Network {
    /// Instantiates `spec` with PyTorch-style uniform initialization.
    pub fn new(spec: &ModelGraphSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes()?;
        let mut net = Network {
            spec: spec.clone(),
            names: Vec::new(),
            params: Vec::new(),
            running: Vec::new(),
            plan: Vec::new(),
        };
        let mut input = spec.input_shape;
        for (i, layer) in spec.layers.iter().enumerate() {
            let width = input.width();
            let plan = match *layer {
                LayerSpec::Conv1d { filters, kernel, padding } => {
                    let bound = 1.0 / ((kernel * width) as f32).sqrt();
                    let w = net.add(format!("{i}.conv.weight"), uniform(rng, &[kernel * width, filters], bound));
                    let b = net.add(format!("{i}.conv.bias"), uniform(rng, &[filters], bound));
                    let pad = match padding {
                        Padding::Valid => 0,
                        Padding::Same => kernel / 2,
                    };
                    LayerPlan::Conv { w, b, kernel, pad }
                }
                LayerSpec::Dense { units } => {
                    let bound = 1.0 / (width as f32).sqrt();
                    let w = net.add(format!("{i}.dense.weight"), uniform(rng, &[width, units], bound));
                    let b = net.add(format!("{i}.dense.bias"), uniform(rng, &[units], bound));
                    LayerPlan::Dense { w, b }
                }
                LayerSpec::RecurrentGru { hidden, layers, return_sequences } => {
                    let cells = net.add_recurrent(i, "gru", 3, width, hidden, layers, rng);
                    LayerPlan::Gru { cells, hidden, return_sequences }
                }
                LayerSpec::RecurrentLstm { hidden, layers, return_sequences } => {
                    let cells = net.add_recurrent(i, "lstm", 4, width, hidden, layers, rng);
                    LayerPlan::Lstm { cells, hidden, return_sequences }
                }
                LayerSpec::ActivationRelu => LayerPlan::Relu,
                LayerSpec::Dropout { rate } => LayerPlan::Dropout(rate),
                LayerSpec::BatchNorm => {
                    let gamma = net.add(format!("{i}.bn.weight"), ArrayD::ones(IxDyn(&[width])));
                    let beta = net.add(format!("{i}.bn.bias"), ArrayD::zeros(IxDyn(&[width])));
                    net.running.push(RunningStats {
                        mean: Array1::zeros(width),
                        var: Array1::ones(width),
                    });
                    LayerPlan::BatchNorm {
                        gamma,
                        beta,
                        stats: net.running.len() - 1,
                    }
                }
                LayerSpec::GlobalMaxPool => LayerPlan::MaxPool,
            };
            net.plan.push(plan);
            input = shapes[i];
        }
        Ok(net)
    }

    fn add(&mut self, name: String, value: ArrayD<f32>) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn add_recurrent(
        &mut self,
        i: usize,
        kind: &str,
        gates: usize,
        width: usize,
        hidden: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Vec<[usize; 4]> {
        let bound = 1.0 / (hidden as f32).sqrt();
        (0..layers)
            .map(|l| {
                let inp = if l == 0 { width } else { hidden };
                [
                    self.add(format!("{i}.{kind}{l}.w_ih"), uniform(rng, &[inp, gates * hidden], bound)),
                    self.add(format!("{i}.{kind}{l}.w_hh"), uniform(rng, &[hidden, gates * hidden], bound)),
                    self.add(format!("{i}.{kind}{l}.b_ih"), uniform(rng, &[gates * hidden], bound)),
                    self.add(format!("{i}.{kind}{l}.b_hh"), uniform(rng, &[gates * hidden], bound)),
                ]
            })
            .collect()
    }

    pub fn spec(&self) -> &ModelGraphSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[ArrayD<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ArrayD<f32>] {
        &mut self.params
    }

    /// Places parameters on the graph. `trainable = false` binds them as
    /// constants so no gradient flows into this network.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.parameter(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn forward(&mut self, g: &mut Graph, bound: &Bound, x: Var, mut mode: Mode<'_>) -> Var {
        let p = &bound.vars;
        let mut h = x;
        for layer in 0..self.plan.len() {
            h = match self.plan[layer].clone() {
                LayerPlan::Conv { w, b, kernel, pad } => {
                    let c = g.conv1d(h, p[w], kernel, pad);
                    g.add_bias(c, p[b])
                }
                LayerPlan::Dense { w, b } => dense(g, h, p[w], p[b]),
                LayerPlan::Relu => g.relu(h),
                LayerPlan::Dropout(rate) => match &mut mode {
                    Mode::Train(rng) if rate > 0.0 => {
                        let keep = 1.0 / (1.0 - rate);
                        let mask = ArrayD::from_shape_simple_fn(g.shape(h).to_vec(), || {
                            if rng.random::<f32>() < rate {
                                0.0
                            } else {
                                keep
                            }
                        });
                        g.mask(h, mask)
                    }
                    _ => h,
                },
                LayerPlan::BatchNorm { gamma, beta, stats } => {
                    let normalized = if mode.is_train() && g.shape(h)[0] > 1 {
                        let n = g.shape(h)[0] as f32;
                        let (node, mean, var) = g.batch_norm(h, BN_EPS);
                        let rs = &mut self.running[stats];
                        let unbiased = var.mapv(|v| v * n / (n - 1.0));
                        rs.mean = &rs.mean * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
                        rs.var = &rs.var * (1.0 - BN_MOMENTUM) + &unbiased * BN_MOMENTUM;
                        node
                    } else {
                        let rs = &self.running[stats];
                        let shift = g.constant(rs.mean.mapv(|m| -m).into_dyn());
                        let scale = g.constant(rs.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt()).into_dyn());
                        let centered = g.add_bias(h, shift);
                        g.mul_row(centered, scale)
                    };
                    let scaled = g.mul_row(normalized, p[gamma]);
                    g.add_bias(scaled, p[beta])
                }
                LayerPlan::MaxPool => g.max_over_time(h),
                LayerPlan::Gru { cells, hidden, return_sequences } => {
                    let mut seq = h;
                    let mut last = h;
                    for cell in &cells {
                        let (s, l) = gru_layer(g, seq, cell.map(|i| p[i]), hidden);
                        seq = s;
                        last = l;
                    }
                    if return_sequences {
                        seq
                    } else {
                        last
                    }
                }
                LayerPlan::Lstm { cells, hidden, return_sequences } => {
                    let mut seq = h;
                    let mut last = h;
                    for cell in &cells {
                        let (s, l) = lstm_layer(g, seq, cell.map(|i| p[i]), hidden);
                        seq = s;
                        last = l;
                    }
                    if return_sequences {
                        seq
                    } else {
                        last
                    }
                }
            };
        }
        h
    }

    /// Copies named parameter gradients out of a gradient table.
    pub fn gradients(&self, bound: &Bound, grads: &crate::nn::graph::Gradients) -> Vec<Option<ArrayD<f32>>> {
        bound.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }

    /// All tensors including batch-norm running statistics, by name.
    pub fn state(&self) -> BTreeMap<String, ArrayD<f32>> {
        let mut out: BTreeMap<String, ArrayD<f32>> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        for (k, rs) in self.running.iter().enumerate() {
            out.insert(format!("running.{k}.mean"), rs.mean.clone().into_dyn());
            out.insert(format!("running.{k}.var"), rs.var.clone().into_dyn());
        }
        out
    }

    /// Loads tensors by name. Every tensor of this network must be present
    /// with a matching shape; extra entries are ignored.
    pub fn load_state(&mut self, state: &BTreeMap<String, ArrayD<f32>>) -> Result<()> {
        for (name, param) in self.names.iter().zip(self.params.iter_mut()) {
            let src = state
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor {name}", self.spec.name)))?;
            if src.shape() != param.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor {name} has shape {:?}, expected {:?}",
                    self.spec.name,
                    src.shape(),
                    param.shape()
                )));
            }
            param.assign(src);
        }
        for (k, rs) in self.running.iter_mut().enumerate() {
            for (suffix, dst) in [("mean", &mut rs.mean), ("var", &mut rs.var)] {
                let name = format!("running.{k}.{suffix}");
                let src = state
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("{}: missing buffer {name}", self.spec.name)))?;
                if src.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("{}: buffer {name} has wrong length", self.spec.name)));
                }
                dst.assign(&Array1::from_iter(src.iter().copied()));
            }
        }
        Ok(())
    }

    /// Copies parameters whose names and shapes match from another network
    /// (used to transfer a CPC encoder into its pooled downstream form).
    pub fn copy_matching_from(&mut self, other: &Network) -> usize {
        let src = other.state();
        let mut copied = 0;
        for (name, param) in self.names.iter().zip(self.params.iter_mut()) {
            if let Some(s) = src.get(name) {
                if s.shape() == param.shape() {
                    param.assign(s);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// SHA-256 over every parameter and buffer, in declaration order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.state() {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let shape = g.shape(x).to_vec();
    if shape.len() == 2 {
        let m = g.matmul(x, w);
        return g.add_bias(m, b);
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x, &[n * t, d]);
    let m = g.matmul(flat, w);
    let out = g.add_bias(m, b);
    let units = g.shape(out)[1];
    g.reshape(out, &[n, t, units])
}

/// Projects every timestep of `[n, t, d]` through `w` and `b` at once.
fn project_inputs(g: &mut Graph, seq: Var, w: Var, b: Var) -> (Var, usize) {
    let t = g.shape(seq)[1];
    (dense(g, seq, w, b), t)
}

/// One GRU layer (PyTorch gate layout r, z, n). Returns the full hidden
/// sequence and the last hidden state.
fn gru_layer(g: &mut Graph, seq: Var, [w_ih, w_hh, b_ih, b_hh]: [Var; 4], hidden: usize) -> (Var, Var) {
    let n = g.shape(seq)[0];
    let (proj, steps) = project_inputs(g, seq, w_ih, b_ih);
    let mut h = g.constant(ArrayD::zeros(IxDyn(&[n, hidden])));
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xi = g.slice_time(proj, t);
        let hm = g.matmul(h, w_hh);
        let hh = g.add_bias(hm, b_hh);
        let xr = g.slice_cols(xi, 0, hidden);
        let hr = g.slice_cols(hh, 0, hidden);
        let r_pre = g.add(xr, hr);
        let r = g.sigmoid(r_pre);
        let xz = g.slice_cols(xi, hidden, hidden);
        let hz = g.slice_cols(hh, hidden, hidden);
        let z_pre = g.add(xz, hz);
        let z = g.sigmoid(z_pre);
        let xn = g.slice_cols(xi, 2 * hidden, hidden);
        let hn = g.slice_cols(hh, 2 * hidden, hidden);
        let rhn = g.mul(r, hn);
        let n_pre = g.add(xn, rhn);
        let cand = g.tanh(n_pre);
        let diff = g.sub(h, cand);
        let zd = g.mul(z, diff);
        h = g.add(cand, zd);
        outs.push(h);
    }
    (g.stack_time(&outs), h)
}

/// One LSTM layer (gate layout i, f, g, o).
fn lstm_layer(g: &mut Graph, seq: Var, [w_ih, w_hh, b_ih, b_hh]: [Var; 4], hidden: usize) -> (Var, Var) {
    let n = g.shape(seq)[0];
    let (proj, steps) = project_inputs(g, seq, w_ih, b_ih);
    let mut h = g.constant(ArrayD::zeros(IxDyn(&[n, hidden])));
    let mut c = g.constant(ArrayD::zeros(IxDyn(&[n, hidden])));
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xi = g.slice_time(proj, t);
        let hm = g.matmul(h, w_hh);
        let hh = g.add_bias(hm, b_hh);
        let gates = g.add(xi, hh);
        let ig = g.slice_cols(gates, 0, hidden);
        let i = g.sigmoid(ig);
        let fg = g.slice_cols(gates, hidden, hidden);
        let f = g.sigmoid(fg);
        let gg = g.slice_cols(gates, 2 * hidden, hidden);
        let cand = g.tanh(gg);
        let og = g.slice_cols(gates, 3 * hidden, hidden);
        let o = g.sigmoid(og);
        let fc = g.mul(f, c);
        let ic = g.mul(i, cand);
        c = g.add(fc, ic);
        let tc = g.tanh(c);
        h = g.mul(o, tc);
        outs.push(h);
    }
    (g.stack_time(&outs), h)
}
