//! Resampling, sliding-window segmentation, user-disjoint folds and
//! source-statistics normalization.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;

use crate::data::types::{ChannelStats, DatasetBundle, FoldSpec, SensorWindow, UserId};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const STD_FLOOR: f32 = 1e-8;

/// Linear interpolation of a `len x channels` series onto a uniform grid
/// at `f_out` Hz. Output length is `round(len * f_out / f_in)`.
pub fn resample(series: &Array2<f32>, f_in: f64, f_out: f64) -> Result<Array2<f32>> {
    if !(f_out > 0.0 && f_in.is_finite() && f_out.is_finite()) {
        return Err(Error::Resample(format!("invalid rates {f_in} -> {f_out}")));
    }
    if f_in < f_out {
        return Err(Error::Resample(format!(
            "upsampling from {f_in} Hz to {f_out} Hz is not supported"
        )));
    }
    let len_in = series.nrows();
    if f_in == f_out || len_in == 0 {
        return Ok(series.clone());
    }
    let len_out = (len_in as f64 * f_out / f_in).round() as usize;
    let ratio = f_in / f_out;
    let mut out = Array2::<f32>::zeros((len_out, series.ncols()));
    for j in 0..len_out {
        let pos = (j as f64 * ratio).min((len_in - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len_in - 1);
        let frac = (pos - lo as f64) as f32;
        for c in 0..series.ncols() {
            let a = series[[lo, c]];
            let b = series[[hi, c]];
            out[[j, c]] = if frac == 0.0 { a } else { a + (b - a) * frac };
        }
    }
    Ok(out)
}

/// Nearest-neighbour resampling of per-sample labels, aligned with
/// [`resample`].
pub fn resample_labels(labels: &[Option<usize>], f_in: f64, f_out: f64) -> Result<Vec<Option<usize>>> {
    if f_in < f_out || f_out <= 0.0 {
        return Err(Error::Resample(format!("cannot resample labels {f_in} -> {f_out}")));
    }
    if f_in == f_out || labels.is_empty() {
        return Ok(labels.to_vec());
    }
    let len_out = (labels.len() as f64 * f_out / f_in).round() as usize;
    let ratio = f_in / f_out;
    Ok((0..len_out)
        .map(|j| {
            let idx = ((j as f64 * ratio).round() as usize).min(labels.len() - 1);
            labels[idx]
        })
        .collect())
}

/// Window stride in samples: `round(window_len * (1 - overlap))`, at least 1.
pub fn stride(window_len: usize, overlap: f64) -> Result<usize> {
    if window_len == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    Ok(((window_len as f64 * (1.0 - overlap)).round() as usize).max(1))
}

/// Start offsets of every complete window; the trailing partial window is
/// discarded and a too-short series yields no windows.
pub fn window_starts(len: usize, window_len: usize, overlap: f64) -> Result<Vec<usize>> {
    let step = stride(window_len, overlap)?;
    if len < window_len {
        return Ok(Vec::new());
    }
    Ok((0..=len - window_len).step_by(step).collect())
}

/// Label of a window: the strict-majority value among its samples. `None`
/// means the window straddles a boundary without a majority and is dropped;
/// `Some(None)` is a majority-unlabeled window.
pub fn majority_label(labels: &[Option<usize>]) -> Option<Option<usize>> {
    let mut counts: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .find(|&(_, c)| 2 * c > labels.len())
        .map(|(l, _)| l)
}

/// Sliding-window segmentation of one user's series.
pub fn segment(
    series: &Array2<f32>,
    labels: &[Option<usize>],
    user: &str,
    dataset: &str,
    window_len: usize,
    overlap: f64,
) -> Result<Segmented> {
    if labels.len() != series.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            labels.len(),
            series.nrows()
        )));
    }
    let mut out = Segmented::default();
    for start in window_starts(series.nrows(), window_len, overlap)? {
        let end = start + window_len;
        match majority_label(&labels[start..end]) {
            Some(label) => out.windows.push(SensorWindow {
                samples: series.slice(s![start..end, ..]).to_owned(),
                label,
                user: user.to_string(),
                dataset: dataset.to_string(),
            }),
            None => out.dropped_boundary += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct Segmented {
    pub windows: Vec<SensorWindow>,
    pub dropped_boundary: usize,
}

/// Fold construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FoldConfig {
    pub n_folds: usize,
    pub test_frac: f64,
    pub val_frac: f64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self {
            n_folds: 5,
            test_frac: 0.2,
            val_frac: 0.2,
        }
    }
}

/// User-disjoint folds. Users are shuffled once and dealt into `n_folds`
/// near-equal test groups so every user is tested exactly once; the
/// remaining users of each fold are shuffled again and split into
/// train/val by `val_frac` (at least one user in each when possible).
pub fn make_folds(users: &BTreeSet<UserId>, cfg: FoldConfig, seed: u64) -> Result<Vec<FoldSpec>> {
    if cfg.n_folds == 0 {
        return Err(Error::Config("n_folds must be positive".into()));
    }
    if users.len() < cfg.n_folds {
        return Err(Error::Config(format!(
            "{} users cannot fill {} folds",
            users.len(),
            cfg.n_folds
        )));
    }
    if (cfg.test_frac * cfg.n_folds as f64 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "test_frac {} must equal 1/n_folds so each user is tested once",
            cfg.test_frac
        )));
    }
    if !(0.0..1.0).contains(&cfg.val_frac) {
        return Err(Error::Config(format!("val_frac {} outside [0, 1)", cfg.val_frac)));
    }
    let mut order: Vec<UserId> = users.iter().cloned().collect();
    order.shuffle(&mut rng_for(seed, "folds", 0));
    let base = order.len() / cfg.n_folds;
    let extra = order.len() % cfg.n_folds;
    let mut folds = Vec::with_capacity(cfg.n_folds);
    let mut cursor = 0;
    for fold_id in 0..cfg.n_folds {
        let size = base + usize::from(fold_id < extra);
        let test: BTreeSet<UserId> = order[cursor..cursor + size].iter().cloned().collect();
        cursor += size;
        let mut rest: Vec<UserId> = order.iter().filter(|u| !test.contains(*u)).cloned().collect();
        rest.shuffle(&mut rng_for(seed, "folds-val", fold_id as u64));
        let mut n_val = (rest.len() as f64 * cfg.val_frac).round() as usize;
        if rest.len() >= 2 && cfg.val_frac > 0.0 {
            n_val = n_val.clamp(1, rest.len() - 1);
        } else {
            n_val = n_val.min(rest.len().saturating_sub(1));
        }
        folds.push(FoldSpec {
            fold_id,
            test_users: test,
            val_users: rest[..n_val].iter().cloned().collect(),
            train_users: rest[n_val..].iter().cloned().collect(),
        });
    }
    Ok(folds)
}

impl ChannelStats {
    /// Per-channel mean and population std over every sample of `windows`.
    pub fn fit(windows: &[SensorWindow], fitted_on: &str) -> Result<Self> {
        let total: usize = windows.iter().map(|w| w.steps()).sum();
        if total < 2 {
            return Err(Error::Stats(format!("{total} samples are too few to fit statistics")));
        }
        let c = windows[0].channels();
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for w in windows {
            for row in w.samples.axis_iter(Axis(0)) {
                for (k, &v) in row.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
            }
        }
        let n = total as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt() as f32).max(STD_FLOOR))
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
            fitted_on: fitted_on.to_string(),
        })
    }

    pub fn normalize(&self, window: &SensorWindow) -> SensorWindow {
        let mut x = window.samples.clone();
        for mut row in x.axis_iter_mut(Axis(0)) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        window.with_samples(x)
    }

    pub fn denormalize(&self, window: &SensorWindow) -> SensorWindow {
        let mut x = window.samples.clone();
        for mut row in x.axis_iter_mut(Axis(0)) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[k] + self.mean[k];
            }
        }
        window.with_samples(x)
    }
}

/// Fits statistics on the source train split of `fold` only.
pub fn fit_source_stats(source: &DatasetBundle, fold: &FoldSpec) -> Result<ChannelStats> {
    let train: Vec<SensorWindow> = source.split_windows(fold, crate::data::types::Split::Train);
    ChannelStats::fit(&train, &source.name)
}

/// Applies (already fitted) statistics to every window of a bundle and
/// records them on the bundle.
pub fn normalize_bundle(bundle: &DatasetBundle, stats: &ChannelStats) -> DatasetBundle {
    DatasetBundle {
        windows: bundle.windows.iter().map(|w| stats.normalize(w)).collect(),
        stats: Some(stats.clone()),
        ..bundle.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn dc_signal_passes_resampling() {
        let x = Array2::from_elem((100, 3), 1.0f32);
        let y = resample(&x, 100.0, 50.0).unwrap();
        assert_eq!(y.nrows(), 50);
        assert!(y.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sine_matches_decimation_oracle() {
        let x = Array2::from_shape_fn((100, 1), |(i, _)| (2.0 * std::f32::consts::PI * 3.0 * i as f32 / 100.0).sin());
        let y = resample(&x, 100.0, 50.0).unwrap();
        assert_eq!(y.nrows(), 50);
        // Independent oracle: integer decimation keeps every second sample.
        let oracle: Vec<f32> = (0..100).step_by(2).map(|i| x[[i, 0]]).collect();
        let rms = (y.column(0).iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f32>() / 50.0).sqrt();
        assert!(rms < 1e-6);
    }

    #[test]
    fn equal_rates_are_identity_and_upsampling_fails() {
        let x = Array2::from_shape_fn((7, 2), |(i, j)| (i * 3 + j) as f32);
        assert_eq!(resample(&x, 50.0, 50.0).unwrap(), x);
        assert!(matches!(resample(&x, 20.0, 50.0), Err(Error::Resample(_))));
    }

    #[test]
    fn non_integer_ratio_length() {
        let x = Array2::from_elem((526, 3), 0.5f32);
        assert_eq!(resample(&x, 52.6, 50.0).unwrap().nrows(), 500);
    }

    #[test]
    fn window_counts_follow_stride_arithmetic() {
        assert_eq!(window_starts(150, 50, 0.5).unwrap(), vec![0, 25, 50, 75, 100]);
        assert_eq!(window_starts(50, 50, 0.5).unwrap(), vec![0]);
        assert!(window_starts(49, 50, 0.5).unwrap().is_empty());
        assert!(window_starts(100, 50, 1.0).is_err());
    }

    #[test]
    fn majority_labeling() {
        assert_eq!(majority_label(&[Some(1), Some(1), Some(2)]), Some(Some(1)));
        assert_eq!(majority_label(&[Some(1), Some(1), Some(2), Some(2)]), None);
        assert_eq!(majority_label(&[None, None, Some(0)]), Some(None));
    }

    #[test]
    fn boundary_windows_without_majority_are_dropped() {
        let x = Array2::zeros((100, 3));
        let labels: Vec<Option<usize>> = (0..100).map(|i| Some(usize::from(i >= 50))).collect();
        // Windows start at 0, 25, 50; the one at 25 is split 25/25.
        let seg = segment(&x, &labels, "u", "d", 50, 0.5).unwrap();
        assert_eq!(seg.windows.len(), 2);
        assert_eq!(seg.dropped_boundary, 1);
        assert_eq!(seg.windows[0].label, Some(0));
        assert_eq!(seg.windows[1].label, Some(1));
    }

    fn users(n: usize) -> BTreeSet<UserId> {
        (0..n).map(|i| format!("u{i:03}")).collect()
    }

    #[test]
    fn ten_users_two_per_test_fold() {
        let folds = make_folds(&users(10), FoldConfig::default(), 7).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.test_users.len(), 2);
            assert_eq!(f.val_users.len(), 2);
            assert_eq!(f.train_users.len(), 6);
        }
    }

    #[test]
    fn five_users_minimum() {
        let folds = make_folds(&users(5), FoldConfig::default(), 1).unwrap();
        assert!(folds.iter().all(|f| f.test_users.len() == 1));
        assert!(make_folds(&users(4), FoldConfig::default(), 1).is_err());
    }

    #[test]
    fn folds_are_seed_deterministic() {
        let a = make_folds(&users(13), FoldConfig::default(), 3).unwrap();
        let b = make_folds(&users(13), FoldConfig::default(), 3).unwrap();
        let c = make_folds(&users(13), FoldConfig::default(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn window(data: Vec<f32>, steps: usize, channels: usize) -> SensorWindow {
        SensorWindow {
            samples: Array2::from_shape_vec((steps, channels), data).unwrap(),
            label: None,
            user: "u".into(),
            dataset: "d".into(),
        }
    }

    #[test]
    fn constant_channel_is_floored_and_maps_to_zero() {
        let w = window(vec![3.0, 1.0, 3.0, -1.0, 3.0, 0.0], 3, 2);
        let stats = ChannelStats::fit(std::slice::from_ref(&w), "d").unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        let n = stats.normalize(&w);
        assert!(n.samples.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_data_is_a_fixed_point() {
        let w = window(vec![1.0, -1.0, -1.0, 1.0], 4, 1);
        let stats = ChannelStats::fit(std::slice::from_ref(&w), "d").unwrap();
        assert!((stats.mean[0]).abs() < 1e-7 && (stats.std[0] - 1.0).abs() < 1e-7);
        let n = stats.normalize(&w);
        for (a, b) in n.samples.iter().zip(w.samples.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_samples_is_a_stats_error() {
        let w = window(vec![1.0, 2.0, 3.0], 1, 3);
        assert!(matches!(ChannelStats::fit(&[w], "d"), Err(Error::Stats(_))));
        assert!(ChannelStats::fit(&[], "d").is_err());
    }
}
