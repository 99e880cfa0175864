//! Define-by-run reverse-mode differentiation over `f32` arrays.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that was created with `requires_grad`.

use ndarray::{s, Array1, Array2, ArrayD, Axis, Ix2, Ix3, IxDyn};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Mask(Var, ArrayD<f32>),
    Reshape(Var),
    Conv1d {
        input: Var,
        weight: Var,
        kernel: usize,
        pad: usize,
        cols: Array2<f32>,
    },
    MaxOverTime {
        input: Var,
        argmax: Vec<usize>,
    },
    SliceTime(Var, usize),
    StackTime(Vec<Var>),
    SliceCols(Var, usize),
    BatchNorm {
        input: Var,
        xhat: Array2<f32>,
        inv_std: Array1<f32>,
    },
    CrossEntropy {
        logits: Var,
        probs: Array2<f32>,
        targets: Vec<usize>,
    },
    External {
        inputs: Vec<(Var, ArrayD<f32>)>,
    },
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: ArrayD<f32>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f32>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f32>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn to2(a: &ArrayD<f32>) -> ndarray::ArrayView2<'_, f32> {
    a.view().into_dimensionality::<Ix2>().expect("expected a matrix")
}

fn to3(a: &ArrayD<f32>) -> ndarray::ArrayView3<'_, f32> {
    a.view().into_dimensionality::<Ix3>().expect("expected a rank-3 tensor")
}

/// Collapses all leading axes so the array becomes `[rows, last_dim]`.
fn rows_view(a: &ArrayD<f32>) -> ndarray::ArrayView2<'_, f32> {
    let d = *a.shape().last().expect("rank >= 1");
    let rows = a.len() / d.max(1);
    a.view()
        .into_shape_with_order((rows, d))
        .expect("contiguous array")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f32>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f32> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        let value = self.value(v);
        debug_assert_eq!(value.len(), 1);
        value.iter().copied().next().unwrap_or(f32::NAN)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A trainable leaf.
    pub fn parameter(&mut self, value: ArrayD<f32>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<f32>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = to2(self.value(a)).dot(&to2(self.value(b))).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = to2(self.value(a)).t().as_standard_layout().into_owned().into_dyn();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// `x[..., d] + b[d]`
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + self.value(b);
        let rg = self.rg(x) || self.rg(b);
        self.push(v, Op::AddBias(x, b), rg)
    }

    /// `x[..., d] * g[d]`
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let v = self.value(x) * self.value(g);
        let rg = self.rg(x) || self.rg(g);
        self.push(v, Op::MulRow(x, g), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `alpha * a + beta`
    pub fn affine(&mut self, a: Var, alpha: f32, beta: f32) -> Var {
        let v = self.value(a).mapv(|x| alpha * x + beta);
        let rg = self.rg(a);
        self.push(v, Op::Affine(a, alpha), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f32::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: ArrayD<f32>) -> Var {
        assert_eq!(self.shape(a), mask.shape(), "mask shape mismatch");
        let v = self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(v, Op::Mask(a, mask), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// 1-D convolution over time. `x` is `[n, t, c]`, `weight` is
    /// `[kernel * c, filters]`; the result is `[n, t', filters]` with
    /// `t' = t + 2 * pad - kernel + 1`. Bias is added separately.
    pub fn conv1d(&mut self, x: Var, weight: Var, kernel: usize, pad: usize) -> Var {
        let xv = to3(self.value(x));
        let (n, t, c) = xv.dim();
        let t_out = t + 2 * pad + 1 - kernel;
        let mut cols = Array2::<f32>::zeros((n * t_out, kernel * c));
        for b in 0..n {
            for o in 0..t_out {
                let mut row = cols.row_mut(b * t_out + o);
                for k in 0..kernel {
                    let src = o + k;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    row.slice_mut(s![k * c..(k + 1) * c])
                        .assign(&xv.slice(s![b, src - pad, ..]));
                }
            }
        }
        let w = to2(self.value(weight));
        let filters = w.ncols();
        let out = cols
            .dot(&w)
            .into_shape_with_order(IxDyn(&[n, t_out, filters]))
            .expect("conv output shape");
        let rg = self.rg(x) || self.rg(weight);
        self.push(
            out,
            Op::Conv1d {
                input: x,
                weight,
                kernel,
                pad,
                cols,
            },
            rg,
        )
    }

    /// Maximum over the time axis: `[n, t, d] -> [n, d]`.
    pub fn max_over_time(&mut self, x: Var) -> Var {
        let xv = to3(self.value(x));
        let (n, t, d) = xv.dim();
        let mut out = Array2::<f32>::zeros((n, d));
        let mut argmax = vec![0usize; n * d];
        for b in 0..n {
            for j in 0..d {
                let mut best = f32::NEG_INFINITY;
                let mut arg = 0;
                for k in 0..t {
                    let val = xv[[b, k, j]];
                    if val > best || (k == 0 && val.is_nan()) {
                        best = val;
                        arg = k;
                    }
                }
                out[[b, j]] = best;
                argmax[b * d + j] = arg;
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::MaxOverTime { input: x, argmax }, rg)
    }

    /// `[n, t, d] -> [n, d]` at one timestep.
    pub fn slice_time(&mut self, x: Var, step: usize) -> Var {
        let v = to3(self.value(x)).slice(s![.., step, ..]).to_owned().into_dyn();
        let rg = self.rg(x);
        self.push(v, Op::SliceTime(x, step), rg)
    }

    /// Stacks `[n, d]` matrices into `[n, t, d]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Var {
        assert!(!steps.is_empty(), "stack_time needs at least one step");
        let views: Vec<_> = steps.iter().map(|&v| to2(self.value(v))).collect();
        let v = ndarray::stack(Axis(1), &views).expect("stack shapes").into_dyn();
        let rg = steps.iter().any(|&s| self.rg(s));
        self.push(v, Op::StackTime(steps.to_vec()), rg)
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = to2(self.value(x))
            .slice(s![.., start..start + len])
            .to_owned()
            .into_dyn();
        let rg = self.rg(x);
        self.push(v, Op::SliceCols(x, start), rg)
    }

    /// Batch standardization over rows of `[n, d]` using batch statistics.
    /// Returns the node plus the batch mean and (biased) variance so callers
    /// can maintain running estimates.
    pub fn batch_norm(&mut self, x: Var, eps: f32) -> (Var, Array1<f32>, Array1<f32>) {
        let xv = to2(self.value(x));
        let mean = xv.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = &xv - &mean;
        let var = centered.mapv(|c| c * c).mean_axis(Axis(0)).expect("non-empty batch");
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let rg = self.rg(x);
        let node = self.push(
            xhat.clone().into_dyn(),
            Op::BatchNorm {
                input: x,
                xhat,
                inv_std,
            },
            rg,
        );
        (node, mean, var)
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = to2(self.value(logits));
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy row mismatch");
        let n = lv.nrows().max(1) as f32;
        let mut probs = Array2::<f32>::zeros(lv.raw_dim());
        let mut loss = 0.0f64;
        for (i, row) in lv.outer_iter().enumerate() {
            let max = row.fold(f32::NEG_INFINITY, |m, &x| m.max(x));
            let sum: f32 = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            for (j, &x) in row.iter().enumerate() {
                probs[[i, j]] = (x - log_z).exp();
            }
            loss += (log_z - row[targets[i]]) as f64;
        }
        let value = ArrayD::from_elem(IxDyn(&[]), (loss / n as f64) as f32);
        let rg = self.rg(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// A scalar computed outside the tape whose gradient with respect to
    /// each input is already known.
    pub fn external_scalar(&mut self, value: f32, inputs: Vec<(Var, ArrayD<f32>)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.shape(*v), g.shape(), "external gradient shape mismatch");
        }
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            Op::External { inputs },
            rg,
        )
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let total: f32 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            Op::WeightedSum(terms.to_vec()),
            rg,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f32>>], v: Var, g: ArrayD<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: ArrayD<f32>, grads: &mut [Option<ArrayD<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let g2 = to2(&g);
                if self.rg(*a) {
                    let da = g2.dot(&to2(self.value(*b)).t());
                    self.accumulate(grads, *a, da.into_dyn());
                }
                if self.rg(*b) {
                    let db = to2(self.value(*a)).t().dot(&g2);
                    self.accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::Transpose(a) => {
                let ga = to2(&g).t().as_standard_layout().into_owned().into_dyn();
                self.accumulate(grads, *a, ga);
            }
            Op::AddBias(x, b) => {
                if self.rg(*b) {
                    let db = rows_view(&g).sum_axis(Axis(0)).into_dyn();
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, g);
            }
            Op::MulRow(x, r) => {
                if self.rg(*r) {
                    let prod = &g * self.value(*x);
                    let dr = rows_view(&prod).sum_axis(Axis(0)).into_dyn();
                    self.accumulate(grads, *r, dr);
                }
                if self.rg(*x) {
                    let dx = &g * self.value(*r);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    self.accumulate(grads, *b, -&g);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, &g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, &g * self.value(*a));
                }
            }
            Op::Affine(a, alpha) => {
                let alpha = *alpha;
                self.accumulate(grads, *a, g.mapv(|x| x * alpha));
            }
            Op::Relu(a) => {
                let mut ga = g;
                ga.zip_mut_with(&node.value, |d, &y| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g;
                ga.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g;
                ga.zip_mut_with(&node.value, |d, &y| *d *= 1.0 - y * y);
                self.accumulate(grads, *a, ga);
            }
            Op::Mask(a, m) => {
                self.accumulate(grads, *a, g * m);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                let ga = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("reshape grad");
                self.accumulate(grads, *a, ga);
            }
            Op::Conv1d {
                input,
                weight,
                kernel,
                pad,
                cols,
            } => {
                let (n, t_out, f) = {
                    let s = g.shape();
                    (s[0], s[1], s[2])
                };
                let g2 = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n * t_out, f))
                    .expect("conv grad");
                if self.rg(*weight) {
                    let dw = cols.t().dot(&g2);
                    self.accumulate(grads, *weight, dw.into_dyn());
                }
                if self.rg(*input) {
                    let w = to2(self.value(*weight));
                    let dcols = g2.dot(&w.t());
                    let in_shape = self.shape(*input);
                    let (t, c) = (in_shape[1], in_shape[2]);
                    let mut dx = ndarray::Array3::<f32>::zeros((n, t, c));
                    for b in 0..n {
                        for o in 0..t_out {
                            let row = dcols.row(b * t_out + o);
                            for k in 0..*kernel {
                                let src = o + k;
                                if src < *pad || src - *pad >= t {
                                    continue;
                                }
                                let mut dst = dx.slice_mut(s![b, src - *pad, ..]);
                                dst += &row.slice(s![k * c..(k + 1) * c]);
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx.into_dyn());
                }
            }
            Op::MaxOverTime { input, argmax } => {
                let in_shape = self.shape(*input).to_vec();
                let (n, d) = (in_shape[0], in_shape[2]);
                let g2 = to2(&g);
                let mut dx = ndarray::Array3::<f32>::zeros((n, in_shape[1], d));
                for b in 0..n {
                    for j in 0..d {
                        dx[[b, argmax[b * d + j], j]] += g2[[b, j]];
                    }
                }
                self.accumulate(grads, *input, dx.into_dyn());
            }
            Op::SliceTime(x, step) => {
                let shape = self.shape(*x).to_vec();
                let mut dx = ndarray::Array3::<f32>::zeros((shape[0], shape[1], shape[2]));
                dx.slice_mut(s![.., *step, ..]).assign(&to2(&g));
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::StackTime(steps) => {
                let g3 = to3(&g);
                for (k, &v) in steps.iter().enumerate() {
                    if self.rg(v) {
                        let gk = g3.slice(s![.., k, ..]).to_owned().into_dyn();
                        self.accumulate(grads, v, gk);
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let shape = self.shape(*x).to_vec();
                let g2 = to2(&g);
                let mut dx = Array2::<f32>::zeros((shape[0], shape[1]));
                dx.slice_mut(s![.., *start..*start + g2.ncols()]).assign(&g2);
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::BatchNorm {
                input,
                xhat,
                inv_std,
            } => {
                let g2 = to2(&g);
                let n = g2.nrows() as f32;
                let sum_g = g2.sum_axis(Axis(0));
                let sum_gx = (&g2 * xhat).sum_axis(Axis(0));
                let mut dx = g2.mapv(|v| v * n);
                dx -= &sum_g;
                dx -= &(xhat * &sum_gx);
                dx *= &inv_std.mapv(|s| s / n);
                self.accumulate(grads, *input, dx.into_dyn());
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let up = g.iter().copied().next().unwrap_or(0.0);
                let n = targets.len().max(1) as f32;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[[i, t]] -= 1.0;
                }
                d.mapv_inplace(|x| x * up / n);
                self.accumulate(grads, *logits, d.into_dyn());
            }
            Op::External { inputs } => {
                let up = g.iter().copied().next().unwrap_or(0.0);
                for (v, dv) in inputs {
                    if self.rg(*v) {
                        self.accumulate(grads, *v, dv.mapv(|x| x * up));
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let up = g.iter().copied().next().unwrap_or(0.0);
                for &(v, w) in terms {
                    if self.rg(v) {
                        let shape = self.nodes[v.0].value.raw_dim();
                        self.accumulate(grads, v, ArrayD::from_elem(shape, up * w));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng as _;

    /// Central finite differences of a scalar-valued graph builder with
    /// respect to one input, computed in f64 on top of f32 forward passes.
    fn numeric_grad(
        inputs: &[ArrayD<f32>],
        which: usize,
        build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    ) -> ArrayD<f32> {
        let eps = 1e-2f32;
        let mut out = ArrayD::zeros(inputs[which].raw_dim());
        for i in 0..inputs[which].len() {
            let eval = |delta: f32| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, a)| {
                        let mut a = a.clone();
                        if k == which {
                            a.as_slice_mut().unwrap()[i] += delta;
                        }
                        g.parameter(a)
                    })
                    .collect();
                let root = build(&mut g, &vars);
                g.scalar(root) as f64
            };
            let d = (eval(eps) - eval(-eps)) / (2.0 * eps as f64);
            out.as_slice_mut().unwrap()[i] = d as f32;
        }
        out
    }

    fn check(inputs: Vec<ArrayD<f32>>, build: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.parameter(a.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| ArrayD::zeros(inputs[k].raw_dim()));
            let numeric = numeric_grad(&inputs, k, build);
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let tol = 2e-2 * (1.0 + n.abs());
                assert!((a - n).abs() < tol, "input {k}: analytic {a} numeric {n}");
            }
        }
    }

    fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f32> {
        let mut rng = crate::rng::rng_for(seed, "graph-test", 0);
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0f32..1.0))
    }

    /// Reduces any node to a scalar with a fixed random projection so that
    /// every output element influences the checked gradient.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let shape = g.shape(v).to_vec();
        let len: usize = shape.iter().product();
        let flat = g.reshape(v, &[1, len]);
        let w = g.constant(rand_array(&[len, 1], seed));
        let out = g.matmul(flat, w);
        g.reshape(out, &[])
    }

    #[test]
    fn matmul_bias_relu_gradients() {
        check(
            vec![rand_array(&[3, 4], 1), rand_array(&[4, 2], 2), rand_array(&[2], 3)],
            &|g, v| {
                let m = g.matmul(v[0], v[1]);
                let b = g.add_bias(m, v[2]);
                let r = g.tanh(b);
                project(g, r, 9)
            },
        );
    }

    #[test]
    fn conv_and_pool_gradients() {
        for pad in [0usize, 1] {
            check(
                vec![rand_array(&[2, 7, 3], 4), rand_array(&[9, 4], 5)],
                &move |g, v| {
                    let c = g.conv1d(v[0], v[1], 3, pad);
                    let p = g.max_over_time(c);
                    project(g, p, 11)
                },
            );
        }
    }

    #[test]
    fn batch_norm_and_elementwise_gradients() {
        check(
            vec![rand_array(&[5, 3], 6), rand_array(&[3], 7), rand_array(&[5, 3], 8)],
            &|g, v| {
                let (bn, _, _) = g.batch_norm(v[0], 1e-5);
                let scaled = g.mul_row(bn, v[1]);
                let s = g.sigmoid(v[2]);
                let m = g.mul(scaled, s);
                let a = g.affine(m, 2.0, 0.5);
                let d = g.sub(a, s);
                project(g, d, 12)
            },
        );
    }

    #[test]
    fn time_slicing_gradients() {
        check(vec![rand_array(&[2, 4, 6], 13)], &|g, v| {
            let a = g.slice_time(v[0], 1);
            let b = g.slice_time(v[0], 3);
            let c = g.slice_cols(a, 2, 3);
            let d = g.slice_cols(b, 0, 3);
            let e = g.add(c, d);
            let st = g.stack_time(&[e, c]);
            let t = g.reshape(st, &[4, 3]);
            let tt = g.transpose(t);
            project(g, tt, 14)
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        check(vec![rand_array(&[4, 3], 15)], &|g, v| {
            let ce = g.cross_entropy(v[0], &[0, 2, 1, 2]);
            let r = g.relu(v[0]);
            let p = project(g, r, 16);
            g.weighted_sum(&[(ce, 1.0), (p, 0.3)])
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(rand_array(&[2, 2], 1));
        let b = g.parameter(rand_array(&[2, 2], 2));
        let m = g.matmul(a, b);
        let r = project(&mut g, m, 3);
        let grads = g.backward(r);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
