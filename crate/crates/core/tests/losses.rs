mod common;

use cdhar::training::losses::softmax_rows;
use cdhar::training::{cross_entropy, kl_consistency, nt_xent, KlDirection};
use common::{brute_nt_xent, fd_gradient, kl_pseudo_to_student, kl_student_to_pseudo, relative_error};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0) * scale)
}

fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    softmax_rows(random_matrix(rng, rows, cols, 2.0).view())
}

#[test]
fn nt_xent_matches_brute_force_on_small_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..200 {
        let pairs = 2 + trial % 3;
        let d = 1 + trial % 16;
        let tau = [0.05, 0.1, 0.5, 1.0][trial % 4];
        let x = random_matrix(&mut rng, 2 * pairs, d, 3.0);
        let got = nt_xent(x.view(), tau).unwrap().value;
        let want = brute_nt_xent(&x, tau);
        assert!((got - want).abs() < 1e-6, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn nt_xent_rejects_bad_batches() {
    let x = Array2::<f64>::ones((3, 4));
    assert!(nt_xent(x.view(), 0.1).is_err());
    let x = Array2::<f64>::ones((2, 4));
    assert!(nt_xent(x.view(), 0.1).is_err());
    let x = Array2::<f64>::ones((4, 4));
    assert!(nt_xent(x.view(), 0.0).is_err());
}

#[test]
fn kl_matches_closed_form_in_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..200 {
        let rows = 1 + trial % 7;
        let k = 2 + trial % 6;
        let z = random_matrix(&mut rng, rows, k, 4.0);
        let p = random_probs(&mut rng, rows, k);
        let fwd = kl_consistency(z.view(), p.view(), KlDirection::PseudoToStudent).unwrap().value;
        let rev = kl_consistency(z.view(), p.view(), KlDirection::StudentToPseudo).unwrap().value;
        assert!((fwd - kl_pseudo_to_student(&z, &p)).abs() < 1e-9, "trial {trial}");
        assert!((rev - kl_student_to_pseudo(&z, &p)).abs() < 1e-9, "trial {trial}");
    }
}

#[test]
fn kl_handles_one_hot_references() {
    let z = Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
    let p = Array2::from_shape_vec((1, 3), vec![0.0, 0.0, 1.0]).unwrap();
    let got = kl_consistency(z.view(), p.view(), KlDirection::PseudoToStudent).unwrap().value;
    assert!((got - kl_pseudo_to_student(&z, &p)).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = 1e-5;
    for trial in 0..30 {
        let x = random_matrix(&mut rng, 6, 5, 2.0);
        let tau = [0.1, 0.5][trial % 2];
        let analytic = nt_xent(x.view(), tau).unwrap().grad;
        let numeric = fd_gradient(|m| brute_nt_xent(m, tau), &x, h);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "nt_xent trial {trial}: {err}");

        let z = random_matrix(&mut rng, 4, 5, 2.0);
        let p = random_probs(&mut rng, 4, 5);
        let analytic = kl_consistency(z.view(), p.view(), KlDirection::PseudoToStudent).unwrap().grad;
        let numeric = fd_gradient(|m| kl_pseudo_to_student(m, &p), &z, h);
        assert!(relative_error(&analytic, &numeric) < 1e-4, "kl forward trial {trial}");
        let analytic = kl_consistency(z.view(), p.view(), KlDirection::StudentToPseudo).unwrap().grad;
        let numeric = fd_gradient(|m| kl_student_to_pseudo(m, &p), &z, h);
        assert!(relative_error(&analytic, &numeric) < 1e-4, "kl reverse trial {trial}");

        let targets: Vec<usize> = (0..4).map(|i| (i + trial) % 5).collect();
        let ce = |m: &Array2<f64>| {
            let q = softmax_rows(m.view());
            -targets.iter().enumerate().map(|(i, &t)| q[[i, t]].ln()).sum::<f64>() / 4.0
        };
        let analytic = cross_entropy(z.view(), &targets).unwrap().grad;
        assert!(relative_error(&analytic, &fd_gradient(ce, &z, h)) < 1e-4, "ce trial {trial}");
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_at_agreement(z in matrix(3, 4), r in matrix(3, 4)) {
        let p = softmax_rows(r.view());
        for dir in [KlDirection::PseudoToStudent, KlDirection::StudentToPseudo] {
            let v = kl_consistency(z.view(), p.view(), dir).unwrap().value;
            prop_assert!(v >= -1e-12);
            let same = kl_consistency(r.view(), p.view(), dir).unwrap();
            prop_assert!(same.value.abs() < 1e-12);
            prop_assert!(same.grad.iter().all(|g| g.abs() < 1e-12));
        }
    }

    #[test]
    fn nt_xent_ignores_pair_order_and_row_scale(x in matrix(6, 4), s in 0.1f64..10.0, swap in 0usize..3) {
        prop_assume!(x.outer_iter().all(|r| r.dot(&r) > 1e-3));
        let base = nt_xent(x.view(), 0.2).unwrap().value;
        let scaled = nt_xent((&x * s).view(), 0.2).unwrap().value;
        prop_assert!((base - scaled).abs() < 1e-9);
        // Reordering whole pairs and swapping within a pair keeps the loss.
        let mut order: Vec<usize> = (0..6).collect();
        order.rotate_left(2 * swap);
        order.swap(0, 1);
        let permuted = x.select(ndarray::Axis(0), &order);
        let moved = nt_xent(permuted.view(), 0.2).unwrap().value;
        prop_assert!((base - moved).abs() < 1e-9);
    }
}
