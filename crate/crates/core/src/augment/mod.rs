//! Seeded augmentations on sensor windows and the policies built from them.
//!
//! Every operation is a pure function of `(spec, window, seed)`.

pub mod transforms;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::types::{DatasetBundle, SensorWindow};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

use ndarray::Array2;

/// Declarative description of one transform or a composition.
///
/// An empty `compose` is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentationSpec {
    /// Additive Gaussian noise, in normalized units.
    Noise { sigma: f32 },
    /// Per-channel gain drawn from N(1, sigma^2).
    Scale { sigma: f32 },
    /// One rotation per window; 180 or more means uniform over SO(3).
    Rotate3d { max_angle_deg: f32 },
    TimeReverse,
    Negate,
    TimeWarp { knots: usize, sigma: f32 },
    ChannelShuffle,
    /// Random-cut segment permutation.
    RandomPerturb { segments: usize },
    Compose { children: Vec<AugmentationSpec> },
}

pub const NOISE_SIGMA: f32 = 0.05;
pub const SCALE_SIGMA: f32 = 0.1;
pub const FULL_ROTATION_DEG: f32 = 180.0;
pub const WARP_KNOTS: usize = 4;
pub const WARP_SIGMA: f32 = 0.2;
pub const PERTURB_SEGMENTS: usize = 5;

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self::Compose { children: Vec::new() }
    }

    /// True for the empty composition.
    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Compose { children } if children.is_empty())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Noise { .. } => "noise",
            Self::Scale { .. } => "scale",
            Self::Rotate3d { .. } => "rotate3d",
            Self::TimeReverse => "time_reverse",
            Self::Negate => "negate",
            Self::TimeWarp { .. } => "time_warp",
            Self::ChannelShuffle => "channel_shuffle",
            Self::RandomPerturb { .. } => "random_perturb",
            Self::Compose { .. } => "compose",
        }
    }

    /// Parses a JSON spec; unknown kinds and fields are configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("augmentation spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Config(format!("{}: {why}", self.kind())));
        match self {
            Self::Noise { sigma } | Self::Scale { sigma } if !sigma.is_finite() || *sigma < 0.0 => {
                bad(format!("sigma must be finite and >= 0, got {sigma}"))
            }
            Self::Rotate3d { max_angle_deg } if !max_angle_deg.is_finite() || *max_angle_deg < 0.0 => {
                bad(format!("max_angle_deg must be finite and >= 0, got {max_angle_deg}"))
            }
            Self::TimeWarp { knots, sigma } if *knots == 0 || !sigma.is_finite() || *sigma < 0.0 => {
                bad(format!("needs knots >= 1 and sigma >= 0, got {knots}, {sigma}"))
            }
            Self::RandomPerturb { segments: 0 } => bad("segments must be >= 1".into()),
            Self::Compose { children } => children.iter().try_for_each(Self::validate),
            _ => Ok(()),
        }
    }

    /// Applies the spec to raw samples.
    pub fn transform(&self, x: &Array2<f32>, seed: u64) -> Result<Array2<f32>> {
        if x.is_empty() {
            return Err(Error::Shape("cannot augment an empty window".into()));
        }
        let mut rng = rng_for(seed, self.kind(), 0);
        Ok(match self {
            Self::Noise { sigma } => transforms::add_noise(x, *sigma, &mut rng),
            Self::Scale { sigma } => transforms::scale(x, *sigma, &mut rng),
            Self::Rotate3d { max_angle_deg } => {
                transforms::require_triples(x)?;
                let r = transforms::random_rotation(&mut rng, *max_angle_deg);
                transforms::rotate_samples(x, &r)
            }
            Self::TimeReverse => transforms::time_reverse(x),
            Self::Negate => transforms::negate(x),
            Self::TimeWarp { knots, sigma } => transforms::time_warp(x, *knots, *sigma, &mut rng),
            Self::ChannelShuffle => transforms::channel_shuffle(x, &mut rng),
            Self::RandomPerturb { segments } => transforms::permute_segments(x, *segments, &mut rng),
            Self::Compose { children } => {
                let mut cur = x.clone();
                for (i, child) in children.iter().enumerate() {
                    cur = child.transform(&cur, derive_seed(seed, "compose", i as u64))?;
                }
                cur
            }
        })
    }
}

/// Applies `spec` to a window; label, user and dataset pass through.
pub fn apply(spec: &AugmentationSpec, window: &SensorWindow, seed: u64) -> Result<SensorWindow> {
    Ok(window.with_samples(spec.transform(&window.samples, seed)?))
}

/// The eight source transforms with their default parameters.
pub fn source_suite() -> Vec<AugmentationSpec> {
    vec![
        AugmentationSpec::Noise { sigma: NOISE_SIGMA },
        AugmentationSpec::Scale { sigma: SCALE_SIGMA },
        AugmentationSpec::Rotate3d { max_angle_deg: FULL_ROTATION_DEG },
        AugmentationSpec::TimeReverse,
        AugmentationSpec::Negate,
        AugmentationSpec::TimeWarp { knots: WARP_KNOTS, sigma: WARP_SIGMA },
        AugmentationSpec::ChannelShuffle,
        AugmentationSpec::RandomPerturb { segments: PERTURB_SEGMENTS },
    ]
}

/// One random rotation per window.
pub fn weak_policy() -> AugmentationSpec {
    AugmentationSpec::Rotate3d { max_angle_deg: FULL_ROTATION_DEG }
}

/// Noise, then rotation, then negation.
pub fn strong_policy() -> AugmentationSpec {
    AugmentationSpec::Compose {
        children: vec![
            AugmentationSpec::Noise { sigma: NOISE_SIGMA },
            AugmentationSpec::Rotate3d { max_angle_deg: FULL_ROTATION_DEG },
            AugmentationSpec::Negate,
        ],
    }
}

pub fn weak_augment(window: &SensorWindow, seed: u64) -> Result<SensorWindow> {
    apply(&weak_policy(), window, seed)
}

pub fn strong_augment(window: &SensorWindow, seed: u64) -> Result<SensorWindow> {
    apply(&strong_policy(), window, seed)
}

/// Keeps every original window and appends one copy per suite transform,
/// grouped per original window.
pub fn augment_source_with(bundle: &DatasetBundle, suite: &[AugmentationSpec], seed: u64) -> Result<DatasetBundle> {
    let k = suite.len();
    let groups: Vec<Vec<SensorWindow>> = bundle
        .windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut group = Vec::with_capacity(k + 1);
            group.push(w.clone());
            for (j, spec) in suite.iter().enumerate() {
                group.push(apply(spec, w, derive_seed(seed, "source-aug", (i * k + j) as u64))?);
            }
            Ok(group)
        })
        .collect::<Result<_>>()?;
    Ok(DatasetBundle {
        windows: groups.into_iter().flatten().collect(),
        ..bundle.clone()
    })
}

/// Source augmentation with the eight default transforms (factor 9).
pub fn augment_source(bundle: &DatasetBundle, seed: u64) -> Result<DatasetBundle> {
    augment_source_with(bundle, &source_suite(), seed)
}

/// Two views from two distinct transforms of `pool`, picked by the seed.
pub fn simclr_views_in(
    pool: &[AugmentationSpec],
    window: &SensorWindow,
    seed: u64,
) -> Result<(SensorWindow, SensorWindow)> {
    if pool.len() < 2 {
        return Err(Error::Config("contrastive views need at least two transforms".into()));
    }
    let mut rng = rng_for(seed, "simclr-pick", 0);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), 2);
    simclr_views_from(&pool[picks.index(0)], &pool[picks.index(1)], window, seed)
}

/// Two views from the eight-transform pool.
pub fn simclr_views(window: &SensorWindow, seed: u64) -> Result<(SensorWindow, SensorWindow)> {
    simclr_views_in(&source_suite(), window, seed)
}

/// Two views from explicitly chosen transforms.
pub fn simclr_views_from(
    first: &AugmentationSpec,
    second: &AugmentationSpec,
    window: &SensorWindow,
    seed: u64,
) -> Result<(SensorWindow, SensorWindow)> {
    Ok((
        apply(first, window, derive_seed(seed, "simclr-view", 0))?,
        apply(second, window, derive_seed(seed, "simclr-view", 1))?,
    ))
}
