//! Array-level transforms on `steps x channels` windows.
//!
//! Spatial transforms (rotation) act on consecutive channel triples, so a
//! window must have a multiple of three channels for them.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal, UnitSphere};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Mat3 = [[f32; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation by `angle` radians about `axis` (normalized here).
pub fn axis_angle_matrix(axis: [f32; 3], angle: f32) -> Mat3 {
    let n = axis.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 || angle == 0.0 {
        return IDENTITY3;
    }
    let half = angle as f64 / 2.0;
    let s = half.sin() / n;
    quaternion_matrix([half.cos(), axis[0] as f64 * s, axis[1] as f64 * s, axis[2] as f64 * s])
}

/// Rotation matrix of the quaternion `[w, x, y, z]` (normalized here).
pub fn quaternion_matrix(q: [f64; 4]) -> Mat3 {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    let m = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    m.map(|r| r.map(|v| v as f32))
}

/// Random proper rotation. At 180 degrees or more this is the uniform
/// (Haar) distribution over SO(3), drawn as a normalized Gaussian
/// quaternion; below that, a uniform axis with angle uniform in
/// `[-max, max]`. Zero gives the identity.
pub fn random_rotation(rng: &mut Rng, max_angle_deg: f32) -> Mat3 {
    if max_angle_deg <= 0.0 {
        return IDENTITY3;
    }
    if max_angle_deg >= 180.0 {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        return quaternion_matrix(q);
    }
    let axis: [f32; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(-1.0f32..=1.0) * max_angle_deg.to_radians();
    axis_angle_matrix(axis, angle)
}

/// Applies `r` to every channel triple of every timestep. The product is
/// accumulated in f64 so norms survive to f32 rounding.
pub fn rotate_samples(x: &Array2<f32>, r: &Mat3) -> Array2<f32> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for tri in 0..row.len() / 3 {
            let v: [f64; 3] = std::array::from_fn(|k| row[3 * tri + k] as f64);
            for i in 0..3 {
                row[3 * tri + i] = (0..3).map(|k| r[i][k] as f64 * v[k]).sum::<f64>() as f32;
            }
        }
    }
    out
}

pub fn require_triples(x: &Array2<f32>) -> Result<()> {
    if x.ncols() == 0 || x.ncols() % 3 != 0 {
        return Err(Error::Shape(format!(
            "rotation needs channel triples, window has {} channels",
            x.ncols()
        )));
    }
    Ok(())
}

pub fn add_noise(x: &Array2<f32>, sigma: f32, rng: &mut Rng) -> Array2<f32> {
    if sigma == 0.0 {
        return x.clone();
    }
    let dist = Normal::new(0.0f32, sigma.abs()).expect("finite sigma");
    x.mapv(|v| v + dist.sample(rng))
}

/// Multiplies each channel by its own factor drawn from N(1, sigma^2).
pub fn scale(x: &Array2<f32>, sigma: f32, rng: &mut Rng) -> Array2<f32> {
    if sigma == 0.0 {
        return x.clone();
    }
    let dist = Normal::new(1.0f32, sigma.abs()).expect("finite sigma");
    let factors: Vec<f32> = (0..x.ncols()).map(|_| dist.sample(rng)).collect();
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for (v, f) in row.iter_mut().zip(&factors) {
            *v *= f;
        }
    }
    out
}

pub fn time_reverse(x: &Array2<f32>) -> Array2<f32> {
    let mut out = x.clone();
    out.invert_axis(Axis(0));
    out.as_standard_layout().into_owned()
}

pub fn negate(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| -v)
}

pub fn channel_shuffle(x: &Array2<f32>, rng: &mut Rng) -> Array2<f32> {
    let mut perm: Vec<usize> = (0..x.ncols()).collect();
    perm.shuffle(rng);
    x.select(Axis(1), &perm)
}

/// Splits time into `segments` contiguous pieces at random cut points and
/// concatenates them in a random order.
pub fn permute_segments(x: &Array2<f32>, segments: usize, rng: &mut Rng) -> Array2<f32> {
    let t = x.nrows();
    let k = segments.clamp(1, t.max(1));
    if k <= 1 {
        return x.clone();
    }
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, t - 1, k - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(t);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let rows: Vec<usize> = order.iter().flat_map(|&s| bounds[s]..bounds[s + 1]).collect();
    x.select(Axis(0), &rows)
}

/// Smooth time warping: a natural cubic spline through `knots + 2` evenly
/// spaced N(1, sigma^2) speeds is integrated into a monotone time map that
/// keeps both endpoints, and the window is linearly resampled along it.
/// One curve is shared by all channels so channel triples stay aligned.
pub fn time_warp(x: &Array2<f32>, knots: usize, sigma: f32, rng: &mut Rng) -> Array2<f32> {
    let t = x.nrows();
    if sigma == 0.0 || t < 2 {
        return x.clone();
    }
    let n = knots + 2;
    let dist = Normal::new(1.0f64, sigma.abs() as f64).expect("finite sigma");
    let xs: Vec<f64> = (0..n).map(|i| i as f64 * (t - 1) as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    let spline = NaturalSpline::new(&xs, &ys);
    // Speeds stay positive so the time map is strictly increasing.
    let speed: Vec<f64> = (0..t).map(|i| spline.eval(i as f64).max(0.05)).collect();
    let mut map = vec![0.0f64; t];
    for i in 1..t {
        map[i] = map[i - 1] + 0.5 * (speed[i - 1] + speed[i]);
    }
    let k = (t - 1) as f64 / map[t - 1];
    for m in &mut map {
        *m *= k;
    }
    let mut out = Array2::<f32>::zeros(x.raw_dim());
    for (i, &pos) in map.iter().enumerate() {
        let pos = pos.clamp(0.0, (t - 1) as f64);
        let lo = (pos.floor() as usize).min(t - 1);
        let hi = (lo + 1).min(t - 1);
        let frac = pos - lo as f64;
        for c in 0..x.ncols() {
            let a = x[[lo, c]] as f64;
            let b = x[[hi, c]] as f64;
            out[[i, c]] = (a + (b - a) * frac) as f32;
        }
    }
    out
}

struct NaturalSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalSpline {
    fn new(xs: &[f64], ys: &[f64]) -> Self {
        let n = xs.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the second-derivative system.
            let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
            let mut diag = vec![0.0; n];
            let mut rhs = vec![0.0; n];
            for i in 1..n - 1 {
                diag[i] = 2.0 * (h[i - 1] + h[i]);
                rhs[i] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
            }
            for i in 2..n - 1 {
                let w = h[i - 1] / diag[i - 1];
                diag[i] -= w * h[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            for i in (1..n - 1).rev() {
                let upper = if i + 1 < n - 1 { h[i] * m[i + 1] } else { 0.0 };
                m[i] = (rhs[i] - upper) / diag[i];
            }
        }
        Self { xs: xs.to_vec(), ys: ys.to_vec(), m }
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let i = match self.xs.iter().position(|&k| k > x) {
            Some(0) => 0,
            Some(p) => p - 1,
            None => n - 2,
        };
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let h = x1 - x0;
        let a = (x1 - x) / h;
        let b = (x - x0) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}
