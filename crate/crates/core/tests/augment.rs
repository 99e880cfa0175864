mod common;

use cdhar::augment::transforms::{negate, random_rotation, rotate_samples, time_reverse};
use cdhar::augment::{augment_source, source_suite, AugmentationSpec};
use cdhar::data::SyntheticDomain;
use cdhar::rng::rng_for;
use common::{det3, orthogonality_defect};
use ndarray::Array2;
use proptest::prelude::*;

fn window(steps: usize, channels: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(-5.0f32..5.0, steps * channels)
        .prop_map(move |v| Array2::from_shape_vec((steps, channels), v).unwrap())
}

fn shaped_window() -> impl Strategy<Value = Array2<f32>> {
    (8usize..64, 1usize..4).prop_flat_map(|(t, k)| window(t, 3 * k))
}

proptest! {
    #[test]
    fn every_transform_preserves_shape(x in shaped_window(), seed in any::<u64>()) {
        let mut suite = source_suite();
        suite.push(AugmentationSpec::Compose { children: source_suite() });
        for spec in &suite {
            let y = spec.transform(&x, seed).unwrap();
            prop_assert_eq!(y.dim(), x.dim(), "{}", spec.kind());
            prop_assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rotations_are_proper_and_norm_preserving(seed in any::<u64>(), max_deg in 0.0f32..360.0, x in window(20, 6)) {
        let r = random_rotation(&mut rng_for(seed, "test", 0), max_deg);
        prop_assert!(orthogonality_defect(&r) < 1e-6);
        prop_assert!((det3(&r) - 1.0).abs() < 1e-6);
        let y = rotate_samples(&x, &r);
        for (a, b) in x.outer_iter().zip(y.outer_iter()) {
            for tri in 0..2 {
                let n = |v: &ndarray::ArrayView1<f32>| {
                    (0..3).map(|k| (v[3 * tri + k] as f64).powi(2)).sum::<f64>().sqrt()
                };
                let (na, nb) = (n(&a), n(&b));
                prop_assert!((na - nb).abs() <= 1e-6 * na.max(1.0), "{na} vs {nb}");
            }
        }
    }

    #[test]
    fn reverse_and_negate_are_involutions(x in shaped_window()) {
        prop_assert_eq!(time_reverse(&time_reverse(&x)), x.clone());
        prop_assert_eq!(negate(&negate(&x)), x.clone());
        let spec = AugmentationSpec::TimeReverse;
        prop_assert_eq!(spec.transform(&spec.transform(&x, 1).unwrap(), 2).unwrap(), x.clone());
    }

    #[test]
    fn identity_parameters_are_fixed_points(x in shaped_window(), seed in any::<u64>()) {
        let identities = [
            AugmentationSpec::Noise { sigma: 0.0 },
            AugmentationSpec::Scale { sigma: 0.0 },
            AugmentationSpec::Rotate3d { max_angle_deg: 0.0 },
            AugmentationSpec::TimeWarp { knots: 4, sigma: 0.0 },
            AugmentationSpec::RandomPerturb { segments: 1 },
            AugmentationSpec::identity(),
        ];
        for spec in &identities {
            prop_assert_eq!(spec.transform(&x, seed).unwrap(), x.clone(), "{}", spec.kind());
        }
    }

    #[test]
    fn transforms_are_pure_functions_of_the_seed(x in shaped_window(), seed in any::<u64>()) {
        for spec in source_suite() {
            prop_assert_eq!(spec.transform(&x, seed).unwrap(), spec.transform(&x, seed).unwrap());
        }
    }

    #[test]
    fn shuffles_and_permutations_keep_the_multiset(x in shaped_window(), seed in any::<u64>()) {
        let sorted = |a: &Array2<f32>| {
            let mut v: Vec<u32> = a.iter().map(|f| f.to_bits()).collect();
            v.sort_unstable();
            v
        };
        for spec in [AugmentationSpec::ChannelShuffle, AugmentationSpec::RandomPerturb { segments: 5 }] {
            prop_assert_eq!(sorted(&spec.transform(&x, seed).unwrap()), sorted(&x));
        }
    }
}

#[test]
fn rotation_requires_channel_triples() {
    let x = Array2::<f32>::ones((10, 4));
    assert!(AugmentationSpec::Rotate3d { max_angle_deg: 30.0 }.transform(&x, 0).is_err());
}

#[test]
fn source_augmentation_multiplies_by_nine() {
    let bundle = SyntheticDomain::target()
        .generate(50, 0.5, Default::default(), 0)
        .unwrap();
    let aug = augment_source(&bundle, 7).unwrap();
    assert_eq!(aug.windows.len(), 9 * bundle.windows.len());
    for (i, w) in bundle.windows.iter().enumerate() {
        let group = &aug.windows[9 * i..9 * i + 9];
        assert_eq!(&group[0], w);
        assert!(group.iter().all(|g| g.label == w.label && g.user == w.user));
    }
    assert_eq!(aug.folds, bundle.folds);
}
