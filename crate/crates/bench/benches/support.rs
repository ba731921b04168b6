use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use symfuse::mcrm::{apply_masking, plan_masking, McrmConfig};
use symfuse::metrics::ConfusionMatrix;

fn masking(c: &mut Criterion) {
    let geometry = McrmConfig::default().geometry();
    let mut rng = StdRng::seed_from_u64(0);
    c.bench_function("plan_masking_b8_64px", |b| {
        b.iter(|| black_box(plan_masking(8, 0.5, &geometry, 64, 64, &mut rng).unwrap()))
    });
    let plan = plan_masking(8, 1.0, &geometry, 64, 64, &mut rng).unwrap();
    let rgb = ArrayD::from_elem(IxDyn(&[8, 3, 64, 64]), 0.5);
    let aux = ArrayD::from_elem(IxDyn(&[8, 1, 64, 64]), 0.5);
    c.bench_function("apply_masking_b8_64px", |b| b.iter(|| black_box(apply_masking(&rgb, &aux, &plan).unwrap())));
}

fn confusion(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(1);
    let n = 512 * 512;
    let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
    let pred: Vec<usize> = gt.iter().map(|&g| if rng.random_bool(0.8) { g } else { rng.random_range(0..6) }).collect();
    c.bench_function("confusion_accumulate_512x512", |b| {
        b.iter(|| {
            let mut cm = ConfusionMatrix::with_background(6, Some(5));
            cm.accumulate(&pred, &gt, None).unwrap();
            black_box(cm.mean_iou())
        })
    });
}

criterion_group!(benches, masking, confusion);
criterion_main!(benches);
