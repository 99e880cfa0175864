//! Fixtures shared by the benchmarks.

use cdhar::rng::rng_for;
use cdhar::SensorWindow;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

/// `n` labeled Gaussian windows of `steps x channels`.
pub fn random_windows(n: usize, steps: usize, channels: usize, n_classes: usize, seed: u64) -> Vec<SensorWindow> {
    let mut rng = rng_for(seed, "bench-windows", 0);
    (0..n)
        .map(|i| SensorWindow {
            samples: Array2::from_shape_fn((steps, channels), |_| StandardNormal.sample(&mut rng)),
            label: Some(i % n_classes),
            user: format!("user{:02}", i % 4),
            dataset: "bench".into(),
        })
        .collect()
}

/// `rows x cols` Gaussian matrix in double precision.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, "bench-matrix", 0);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}
