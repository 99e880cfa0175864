use cdhar::augment::{source_suite, AugmentationSpec};
use cdhar::training::baselines::init_classifier;
use cdhar::training::{nt_xent, train_teacher, EncoderKind, OptimHyper, RunContext};
use cdhar_bench::{random_matrix, random_windows};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

fn encoder_step(c: &mut Criterion) {
    let windows = random_windows(64, 50, 3, 6, 0);
    let hp = OptimHyper {
        batch_size: 64,
        max_epochs: 1,
        ..OptimHyper::teacher()
    };
    let ctx = RunContext::new(0, "bench");
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for kind in [EncoderKind::Conv, EncoderKind::DeepConvLstm] {
        let init = init_classifier(kind, (50, 3), 6, 0).unwrap();
        group.bench_function(format!("{kind:?}_batch64"), |b| {
            b.iter_batched(
                || init.clone(),
                |m| train_teacher(m, &windows, &[], &hp, &ctx).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn contrastive_loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("nt_xent");
    for pairs in [64usize, 256] {
        let emb = random_matrix(2 * pairs, 128, 1);
        group.bench_function(format!("{pairs}_pairs_d128"), |b| b.iter(|| nt_xent(black_box(emb.view()), 0.1).unwrap()));
    }
    group.finish();
}

fn augmentation(c: &mut Criterion) {
    let x = random_windows(1, 50, 3, 1, 2).remove(0).samples;
    let mut group = c.benchmark_group("augment");
    for spec in source_suite() {
        group.bench_function(spec.kind(), |b| b.iter(|| spec.transform(black_box(&x), 7).unwrap()));
    }
    let strong = AugmentationSpec::Compose { children: source_suite() };
    group.bench_function("compose_all", |b| b.iter(|| strong.transform(black_box(&x), 7).unwrap()));
    group.finish();
}

criterion_group!(benches, encoder_step, contrastive_loss, augmentation);
criterion_main!(benches);
