//! Loss functions evaluated in f64 with analytic gradients.
//!
//! Each returns the batch-mean value and the gradient with respect to its
//! matrix input, ready to be attached to a graph node through
//! [`crate::nn::Graph::external_scalar`].

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to reference probabilities before taking logs.
const PROB_FLOOR: f64 = 1e-12;

/// Argument order of the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(pseudo || student): the teacher distribution is the reference.
    #[default]
    PseudoToStudent,
    /// KL(student || pseudo).
    StudentToPseudo,
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Mean over rows of the KL divergence between soft pseudo-labels and the
/// softmax of student logits, in the requested direction.
pub fn kl_consistency(logits: ArrayView2<'_, f64>, pseudo: ArrayView2<'_, f64>, dir: KlDirection) -> Result<LossValue> {
    if logits.dim() != pseudo.dim() {
        return Err(Error::Shape(format!(
            "student logits {:?} and pseudo-labels {:?} differ in shape",
            logits.dim(),
            pseudo.dim()
        )));
    }
    let n = logits.nrows();
    if n == 0 {
        return Err(Error::Training("consistency loss on an empty batch".into()));
    }
    let q = softmax_rows(logits);
    let mut grad = Array2::<f64>::zeros(q.raw_dim());
    let mut total = 0.0;
    for ((qr, pr), mut gr) in q.outer_iter().zip(pseudo.outer_iter()).zip(grad.outer_iter_mut()) {
        match dir {
            KlDirection::PseudoToStudent => {
                let mut kl = 0.0;
                for (&p, &qv) in pr.iter().zip(qr.iter()) {
                    if p > 0.0 {
                        kl += p * (p.ln() - qv.max(f64::MIN_POSITIVE).ln());
                    }
                }
                total += kl;
                let mass: f64 = pr.sum();
                for ((g, &p), &qv) in gr.iter_mut().zip(pr.iter()).zip(qr.iter()) {
                    *g = (mass * qv - p) / n as f64;
                }
            }
            KlDirection::StudentToPseudo => {
                let diff: Vec<f64> = qr
                    .iter()
                    .zip(pr.iter())
                    .map(|(&qv, &p)| qv.max(f64::MIN_POSITIVE).ln() - p.max(PROB_FLOOR).ln())
                    .collect();
                let kl: f64 = qr.iter().zip(&diff).map(|(&qv, d)| qv * d).sum();
                total += kl;
                for ((g, &qv), d) in gr.iter_mut().zip(qr.iter()).zip(&diff) {
                    *g = qv * (d - kl) / n as f64;
                }
            }
        }
    }
    Ok(LossValue { value: total / n as f64, grad })
}

/// NT-Xent over `2N` embeddings where rows `2k` and `2k+1` are a positive
/// pair: cosine similarities scaled by `1 / temperature`, self-similarity
/// excluded, averaged over all `2N` anchors.
pub fn nt_xent(embeddings: ArrayView2<'_, f64>, temperature: f64) -> Result<LossValue> {
    let rows = embeddings.nrows();
    if rows % 2 != 0 {
        return Err(Error::Shape(format!("NT-Xent needs paired rows, got {rows}")));
    }
    if rows < 4 {
        return Err(Error::Training(format!(
            "NT-Xent batch too small: {} pairs, need at least 2",
            rows / 2
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("NT-Xent temperature must be > 0, got {temperature}")));
    }
    let norms: Vec<f64> = embeddings
        .outer_iter()
        .map(|r| r.dot(&r).sqrt().max(PROB_FLOOR))
        .collect();
    let mut u = embeddings.to_owned();
    for (mut r, &nrm) in u.outer_iter_mut().zip(&norms) {
        r.mapv_inplace(|v| v / nrm);
    }
    let sim = u.dot(&u.t()) / temperature;
    // a[i][k] = dL/dsim[i][k]
    let mut a = Array2::<f64>::zeros((rows, rows));
    let mut total = 0.0;
    for i in 0..rows {
        let pos = i ^ 1;
        let m = (0..rows).filter(|&k| k != i).map(|k| sim[[i, k]]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..rows).filter(|&k| k != i).map(|k| (sim[[i, k]] - m).exp()).sum();
        total += m + denom.ln() - sim[[i, pos]];
        for k in (0..rows).filter(|&k| k != i) {
            let p = (sim[[i, k]] - m).exp() / denom;
            a[[i, k]] = (p - if k == pos { 1.0 } else { 0.0 }) / rows as f64;
        }
    }
    let sym = &a + &a.t();
    let gu = sym.dot(&u) / temperature;
    let mut grad = Array2::<f64>::zeros(u.raw_dim());
    for i in 0..rows {
        let ui = u.row(i);
        let gi = gu.row(i);
        let proj = ui.dot(&gi);
        let mut out = grad.row_mut(i);
        for k in 0..ui.len() {
            out[k] = (gi[k] - ui[k] * proj) / norms[i];
        }
    }
    Ok(LossValue { value: total / rows as f64, grad })
}

/// Mean cross-entropy of logits against hard labels, with its gradient.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, targets: &[usize]) -> Result<LossValue> {
    if logits.nrows() != targets.len() || logits.nrows() == 0 {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut total = 0.0;
    for (mut row, &t) in grad.outer_iter_mut().zip(targets) {
        if t >= row.len() {
            return Err(Error::Shape(format!("target {t} out of range for {} classes", row.len())));
        }
        total -= row[t].max(f64::MIN_POSITIVE).ln();
        row[t] -= 1.0;
        row.mapv_inplace(|v| v / n);
    }
    Ok(LossValue { value: total / n, grad })
}

/// Converts a 2-D graph value to f64.
pub fn to_f64(x: &ndarray::ArrayD<f32>) -> Result<Array2<f64>> {
    x.view()
        .into_dimensionality::<ndarray::Ix2>()
        .map(|v| v.mapv(f64::from))
        .map_err(|_| Error::Shape(format!("expected a matrix, got shape {:?}", x.shape())))
}

/// Argmax per row.
pub fn argmax_rows(x: ArrayView2<'_, f64>) -> Vec<usize> {
    x.axis_iter(Axis(0))
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
