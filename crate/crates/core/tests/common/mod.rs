//! Independent oracles shared by the integration tests. Nothing here calls
//! the implementation it checks.

#![allow(dead_code)]

use ndarray::Array2;

/// Direct NT-Xent: for each anchor `i` with partner `i ^ 1`, the negative
/// log of the partner's softmax share among all other rows.
pub fn brute_nt_xent(emb: &Array2<f64>, tau: f64) -> f64 {
    let n = emb.nrows();
    let cos = |a: usize, b: usize| {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for k in 0..emb.ncols() {
            dot += emb[[a, k]] * emb[[b, k]];
            na += emb[[a, k]] * emb[[a, k]];
            nb += emb[[b, k]] * emb[[b, k]];
        }
        dot / (na.sqrt() * nb.sqrt())
    };
    let mut total = 0.0;
    for i in 0..n {
        let partner = if i % 2 == 0 { i + 1 } else { i - 1 };
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (cos(i, k) / tau).exp();
            }
        }
        total += -((cos(i, partner) / tau).exp() / denom).ln();
    }
    total / n as f64
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `KL(p || softmax(z))` per row via `sum p ln p - sum p z + lse(z)`,
/// averaged over rows.
pub fn kl_pseudo_to_student(z: &Array2<f64>, p: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (zr, pr) in z.outer_iter().zip(p.outer_iter()) {
        let zr: Vec<f64> = zr.to_vec();
        let lse = log_sum_exp(&zr);
        let ent: f64 = pr.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
        let cross: f64 = pr.iter().zip(&zr).map(|(a, b)| a * b).sum();
        total += ent - cross + lse * pr.sum();
    }
    total / z.nrows() as f64
}

/// `KL(softmax(z) || p)` per row via `ln q = z - lse(z)`, averaged.
pub fn kl_student_to_pseudo(z: &Array2<f64>, p: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (zr, pr) in z.outer_iter().zip(p.outer_iter()) {
        let zr: Vec<f64> = zr.to_vec();
        let lse = log_sum_exp(&zr);
        total += zr
            .iter()
            .zip(pr.iter())
            .map(|(&zi, &pi)| (zi - lse).exp() * ((zi - lse) - pi.ln()))
            .sum::<f64>();
    }
    total / z.nrows() as f64
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[idx];
        xp[idx] = orig + h;
        let up = f(&xp);
        xp[idx] = orig - h;
        let down = f(&xp);
        xp[idx] = orig;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let norm = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = norm(&(a - b));
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Mean over classes of `2PR / (P + R)` with zero for undefined terms.
pub fn macro_f1_oracle(cm: &[Vec<u64>]) -> f64 {
    let k = cm.len();
    let mut sum = 0.0;
    for c in 0..k {
        let tp = cm[c][c] as f64;
        let predicted: f64 = (0..k).map(|r| cm[r][c] as f64).sum();
        let actual: f64 = cm[c].iter().map(|&v| v as f64).sum();
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        if p + r > 0.0 {
            sum += 2.0 * p * r / (p + r);
        }
    }
    sum / k as f64
}

/// Complete windows of `w` samples taken every `step` samples.
pub fn window_count_oracle(len: usize, w: usize, step: usize) -> usize {
    let mut count = 0;
    let mut start = 0;
    while start + w <= len {
        count += 1;
        start += step;
    }
    count
}

/// Determinant of a 3x3 matrix.
pub fn det3(m: &[[f32; 3]; 3]) -> f64 {
    let m = |i: usize, j: usize| m[i][j] as f64;
    m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
        + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
}

/// Largest entry of `|R^T R - I|`.
pub fn orthogonality_defect(m: &[[f32; 3]; 3]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[k][i] as f64 * m[k][j] as f64).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - want).abs());
        }
    }
    worst
}

/// A configuration small enough for a full pipeline pass in seconds: one
/// seed, two folds, one label budget and single-digit epoch counts.
pub fn tiny_config() -> cdhar::ExperimentConfig {
    let mut cfg = cdhar::ExperimentConfig::synthetic_quick();
    cfg.seeds = vec![0];
    cfg.n_per_class = vec![2];
    cfg.data.n_folds = 2;
    cfg.teacher.max_epochs = 2;
    cfg.student.max_epochs = 1;
    cfg.fewshot.max_epochs = 5;
    cfg.baselines.classifier.max_epochs = 2;
    cfg.baselines.simclr.optim.max_epochs = 1;
    cfg.baselines.cpc.optim.max_epochs = 1;
    cfg.search.budget = 2;
    cfg.search.n_per_class = 2;
    cfg
}
