//! Acceptance checks, one PASS/FAIL line per criterion. Runs without the
//! libtest harness; `-- --ignored` also runs the real-dataset check when
//! the datasets are present.

mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cdhar::augment::transforms::{negate, random_rotation, rotate_samples, time_reverse};
use cdhar::augment::{augment_source, source_suite, strong_policy, AugmentationSpec};
use cdhar::data::{make_folds, segment, stride, FoldConfig, Split, SyntheticDomain};
use cdhar::evaluation::{ablation_configs, ablation_suite, macro_f1};
use cdhar::experiment::{Pipeline, DATASETS_ROOT_ENV};
use cdhar::rng::rng_for;
use cdhar::training::losses::softmax_rows;
use cdhar::training::{
    kl_consistency, nt_xent, train_student, train_teacher, Classifier, EncoderKind, KlDirection, LossWeights,
    OptimHyper, PseudoLabelSet, RunContext, StudentInputs,
};
use cdhar::{ConfusionMatrix, ExperimentConfig, Method, SensorWindow};
use common::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: cdhar::Error) -> String {
    e.to_string()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0) * scale)
}

fn loss_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_nt, mut worst_kl, mut worst_grad) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..300 {
        let pairs = 2 + trial % 3;
        let d = 1 + trial % 16;
        let tau = [0.05, 0.1, 0.5, 1.0][trial % 4];
        let x = random_matrix(&mut rng, 2 * pairs, d, 3.0);
        let got = nt_xent(x.view(), tau).map_err(err)?;
        worst_nt = worst_nt.max((got.value - brute_nt_xent(&x, tau)).abs());

        let z = random_matrix(&mut rng, 1 + trial % 7, 2 + trial % 6, 4.0);
        let p = softmax_rows(random_matrix(&mut rng, z.nrows(), z.ncols(), 2.0).view());
        let fwd = kl_consistency(z.view(), p.view(), KlDirection::PseudoToStudent).map_err(err)?;
        let rev = kl_consistency(z.view(), p.view(), KlDirection::StudentToPseudo).map_err(err)?;
        worst_kl = worst_kl
            .max((fwd.value - kl_pseudo_to_student(&z, &p)).abs())
            .max((rev.value - kl_student_to_pseudo(&z, &p)).abs());

        if trial % 10 == 0 {
            let h = 1e-5;
            worst_grad = worst_grad
                .max(relative_error(&got.grad, &fd_gradient(|m| brute_nt_xent(m, tau), &x, h)))
                .max(relative_error(&fwd.grad, &fd_gradient(|m| kl_pseudo_to_student(m, &p), &z, h)))
                .max(relative_error(&rev.grad, &fd_gradient(|m| kl_student_to_pseudo(m, &p), &z, h)));
        }
    }
    ensure(worst_nt < 1e-6, || format!("nt_xent off by {worst_nt:e}"))?;
    ensure(worst_kl < 1e-9, || format!("KL off by {worst_kl:e}"))?;
    ensure(worst_grad < 1e-4, || format!("gradient relative error {worst_grad:e}"))?;
    Ok(format!("nt_xent {worst_nt:.1e}, KL {worst_kl:.1e}, grad {worst_grad:.1e}"))
}

fn augmentation_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_norm = 0.0f64;
    for trial in 0..200u64 {
        let steps = rng.random_range(8..64);
        let x = Array2::from_shape_fn((steps, 6), |_| rng.random_range(-5.0f32..5.0));
        for spec in source_suite() {
            let y = spec.transform(&x, trial).map_err(err)?;
            ensure(y.dim() == x.dim(), || format!("{} changed the shape", spec.kind()))?;
        }
        let r = random_rotation(&mut rng_for(trial, "acceptance", 0), rng.random_range(0.0..360.0));
        ensure(orthogonality_defect(&r) < 1e-6, || format!("rotation not orthogonal: {r:?}"))?;
        ensure((det3(&r) - 1.0).abs() < 1e-6, || format!("det {} != 1", det3(&r)))?;
        let y = rotate_samples(&x, &r);
        for (a, b) in x.outer_iter().zip(y.outer_iter()) {
            for tri in 0..2 {
                let n = |v: &ndarray::ArrayView1<f32>| (0..3).map(|k| (v[3 * tri + k] as f64).powi(2)).sum::<f64>().sqrt();
                worst_norm = worst_norm.max((n(&a) - n(&b)).abs() / n(&a).max(1.0));
            }
        }
        ensure(time_reverse(&time_reverse(&x)) == x, || "time_reverse is not an involution".into())?;
        ensure(negate(&negate(&x)) == x, || "negate is not an involution".into())?;
        for spec in [
            AugmentationSpec::Noise { sigma: 0.0 },
            AugmentationSpec::Scale { sigma: 0.0 },
            AugmentationSpec::Rotate3d { max_angle_deg: 0.0 },
            AugmentationSpec::TimeWarp { knots: 4, sigma: 0.0 },
            AugmentationSpec::RandomPerturb { segments: 1 },
            AugmentationSpec::identity(),
        ] {
            ensure(spec.transform(&x, trial).map_err(err)? == x, || format!("{} identity moved data", spec.kind()))?;
        }
    }
    ensure(worst_norm < 1e-6, || format!("rotation changed a norm by {worst_norm:e}"))?;
    Ok(format!("8 transforms, worst norm drift {worst_norm:.1e}"))
}

fn pipeline_arithmetic() -> Check {
    let bundle = SyntheticDomain::target().generate(50, 0.5, FoldConfig::default(), 0).map_err(err)?;
    let aug = augment_source(&bundle, 3).map_err(err)?;
    ensure(aug.windows.len() == 9 * bundle.windows.len(), || {
        format!("{} augmented from {}", aug.windows.len(), bundle.windows.len())
    })?;

    for len in [0usize, 49, 50, 51, 128, 301, 1000] {
        for (w, overlap) in [(50, 0.5), (50, 0.0), (40, 0.75), (7, 0.3)] {
            let step = ((w as f64 * (1.0 - overlap)).round() as usize).max(1);
            ensure(stride(w, overlap).map_err(err)? == step, || format!("stride {w} {overlap}"))?;
            let labels = vec![Some(0); len];
            let seg = segment(&Array2::zeros((len, 3)), &labels, "u", "d", w, overlap).map_err(err)?;
            ensure(seg.windows.len() == window_count_oracle(len, w, step), || {
                format!("len {len} w {w} overlap {overlap}: {} windows", seg.windows.len())
            })?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n_users in 5..=100 {
        let users: BTreeSet<String> = (0..n_users).map(|i| format!("u{i}")).collect();
        let n_folds = rng.random_range(2..=5);
        let cfg = FoldConfig {
            n_folds,
            test_frac: 1.0 / n_folds as f64,
            val_frac: 0.2,
        };
        let folds = make_folds(&users, cfg, rng.random()).map_err(err)?;
        let mut tested = BTreeSet::new();
        for f in &folds {
            let all: BTreeSet<String> = f.test_users.iter().chain(&f.val_users).chain(&f.train_users).cloned().collect();
            let sizes = f.test_users.len() + f.val_users.len() + f.train_users.len();
            ensure(all == users && sizes == n_users, || format!("{n_users} users: fold {} overlaps", f.fold_id))?;
            tested.extend(f.test_users.iter().cloned());
        }
        ensure(tested == users, || format!("{n_users} users: not every user tested"))?;
    }

    let probs = softmax_rows(random_matrix(&mut rng, 500, 6, 3.0).view());
    let mut previous: Option<BTreeSet<usize>> = None;
    for t in [0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 0.95] {
        let kept: BTreeSet<usize> = PseudoLabelSet::from_probabilities(&probs, t)
            .map_err(err)?
            .retained_indices()
            .into_iter()
            .collect();
        let want: BTreeSet<usize> = (0..500).filter(|&i| probs.row(i).iter().cloned().fold(0.0, f64::max) >= t).collect();
        ensure(kept == want, || format!("threshold {t}: wrong retained set"))?;
        if let Some(prev) = &previous {
            ensure(kept.is_subset(prev), || format!("threshold {t}: not monotone"))?;
        }
        previous = Some(kept);
    }
    Ok("x9 augmentation, stride counts, folds for 5..=100 users, threshold filter".into())
}

fn macro_f1_oracle_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let k = rng.random_range(2..=8);
        let rows: Vec<Vec<u64>> = (0..k)
            .map(|_| (0..k).map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(0..50) }).collect())
            .collect();
        if rows.iter().flatten().all(|&v| v == 0) {
            continue;
        }
        let got = macro_f1(&ConfusionMatrix::from_rows(&rows).map_err(err)?).map_err(err)?;
        worst = worst.max((got - macro_f1_oracle(&rows)).abs());
        checked += 1;
    }
    ensure(worst < 1e-9, || format!("macro F1 off by {worst:e}"))?;
    for k in 1..=8 {
        let truth: Vec<usize> = (0..10 * k).map(|i| i % k).collect();
        let f1 = macro_f1(&ConfusionMatrix::from_predictions(&truth, &truth, k).map_err(err)?).map_err(err)?;
        ensure(f1 == 1.0, || format!("perfect predictions over {k} classes gave {f1}"))?;
    }
    Ok(format!("1000 matrices, worst {worst:.1e}; perfect = 1.0"))
}

fn end_to_end_transfer() -> Check {
    let start = Instant::now();
    let cfg = ExperimentConfig::synthetic_quick();
    let mut pipeline = Pipeline::new(cfg).map_err(err)?;
    let ours = pipeline.run_method(Method::CrossDomainHar).map_err(err)?;
    let naive = pipeline.run_method(Method::NaiveTransfer).map_err(err)?;
    let elapsed = start.elapsed();
    let at = |r: &cdhar::MetricsReport, n: usize| r.at(n).map(|s| s.mean_f1).ok_or(format!("no summary at n={n}"));
    let mut detail = Vec::new();
    for n in [2, 10, 50] {
        detail.push(format!("n={n}: {:.3} vs {:.3}", at(&ours, n)?, at(&naive, n)?));
    }
    let detail = format!("{}; {:.0}s", detail.join(", "), elapsed.as_secs_f64());
    ensure(elapsed < Duration::from_secs(15 * 60), || format!("too slow: {detail}"))?;
    for n in [2, 10] {
        let gap = at(&ours, n)? - at(&naive, n)?;
        ensure(gap >= 0.02, || format!("gap at n={n} is {gap:.3} (< 0.02): {detail}"))?;
    }
    ensure(at(&ours, 50)? >= at(&ours, 2)? - 0.02, || format!("n=50 below n=2: {detail}"))?;
    Ok(detail)
}

fn zero_weight_replay() -> Result<usize, String> {
    let raw = SyntheticDomain::source().generate(50, 0.5, FoldConfig::default(), 0).map_err(err)?;
    let fold = &raw.folds[0];
    let pick = |split| raw.split_windows(fold, split).into_iter().step_by(6).collect::<Vec<SensorWindow>>();
    let (train, val) = (pick(Split::Train), pick(Split::Val));
    let target = pick(Split::Test);
    let hp = OptimHyper {
        batch_size: 32,
        max_epochs: 3,
        ..OptimHyper::teacher()
    };
    let init = Classifier::new(EncoderKind::Conv, 50, 3, raw.n_classes(), &mut rng_for(0, "init", 0)).map_err(err)?;
    let ctx = RunContext::new(4, "acceptance");
    let (_, plain) = train_teacher(init.clone(), &train, &val, &hp, &ctx).map_err(err)?;
    let uniform = Array2::from_elem((target.len(), raw.n_classes()), 1.0 / raw.n_classes() as f64);
    let pseudo = PseudoLabelSet::from_probabilities(&uniform, 0.0).map_err(err)?;
    let inputs = StudentInputs {
        target: &target,
        pseudo: &pseudo,
        weights: LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossWeights::default()
        },
        strong: strong_policy(),
        view_pool: source_suite(),
    };
    let (_, zeroed) = train_student(&init, &train, &val, &inputs, &hp, &ctx).map_err(err)?;
    ensure(plain.steps.len() == zeroed.steps.len(), || "step counts differ".into())?;
    for (a, b) in plain.steps.iter().zip(&zeroed.steps) {
        ensure(a.total == b.total && a.ce == b.ce, || {
            format!("epoch {} step {}: {} vs {}", a.epoch, a.step, a.total, b.total)
        })?;
    }
    Ok(plain.steps.len())
}

fn ablation_plumbing() -> Check {
    let steps = zero_weight_replay()?;
    // Two teacher epochs leave some ablations with no confident pseudo-label.
    let mut base = tiny_config();
    base.teacher.max_epochs = 6;
    let hashes: BTreeSet<String> = ablation_configs(&base).iter().map(|(_, c)| c.hash()).collect();
    ensure(hashes.len() == 4, || format!("{} distinct ablation hashes", hashes.len()))?;
    let reports = ablation_suite(&base).map_err(err)?;
    ensure(reports.len() == 4, || format!("{} ablation reports", reports.len()))?;
    for (a, r) in &reports {
        ensure(r.is_complete() && r.method == a.tag(), || format!("{} report incomplete", a.tag()))?;
    }
    Ok(format!("{steps} identical steps; 4 distinct hashes, 4 complete reports"))
}

enum Gated {
    Skip(String),
    Ran(Check),
}

fn real_dataset_check(requested: bool) -> Gated {
    if !requested {
        return Gated::Skip("real-dataset run not requested (pass -- --ignored)".into());
    }
    let Some(root) = std::env::var_os(DATASETS_ROOT_ENV).map(PathBuf::from) else {
        return Gated::Skip(format!("{DATASETS_ROOT_ENV} is not set"));
    };
    for id in ["mobiact", "motionsense"] {
        if !root.join(id).is_dir() {
            return Gated::Skip(format!("{} is missing", root.join(id).display()));
        }
    }
    Gated::Ran((|| {
        let mut cfg = ExperimentConfig::default();
        cfg.source = "mobiact".into();
        cfg.target = "motionsense".into();
        cfg.n_per_class = vec![100];
        cfg.paths.datasets_root = Some(root);
        let mut pipeline = Pipeline::new(cfg).map_err(err)?;
        let ours = pipeline.run_method(Method::CrossDomainHar).map_err(err)?;
        let conv = pipeline.run_method(Method::ConvClassifier).map_err(err)?;
        let (a, b) = (ours.summary[0].mean_f1, conv.summary[0].mean_f1);
        ensure(a > b, || format!("{a:.3} vs {b:.3}"))?;
        Ok(format!("{a:.3} vs {b:.3}"))
    })())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let ignored = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    // libtest-style listing (e.g. from IDEs) expects no output.
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let checks: [(&str, fn() -> Check); 6] = [
        ("loss oracles", loss_oracles),
        ("augmentation invariants", augmentation_invariants),
        ("pipeline arithmetic", pipeline_arithmetic),
        ("macro F1", macro_f1_oracle_check),
        ("synthetic end-to-end transfer", end_to_end_transfer),
        ("ablation plumbing", ablation_plumbing),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    match real_dataset_check(ignored) {
        Gated::Skip(why) => println!("criterion 7 real-dataset transfer: SKIP ({why})"),
        Gated::Ran(Ok(detail)) => println!("criterion 7 real-dataset transfer: PASS ({detail})"),
        Gated::Ran(Err(why)) => {
            failed += 1;
            println!("criterion 7 real-dataset transfer: FAIL ({why})");
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
