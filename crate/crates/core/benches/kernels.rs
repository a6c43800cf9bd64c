//! Rayon versus sequential execution of the per-item maps the model is built
//! on. Build with `--no-default-features` to also run the inner kernels
//! sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msa_core::boxes::BBox;
use msa_core::harness::dataset::{synthesize, DatasetMeta};
use msa_core::harness::train::{image_step, Augment};
use msa_core::harness::RunConfig;
use msa_core::model::Model;
use msa_core::par::{map_indexed, map_indexed_seq};
use msa_core::tensor::kernels::{conv2d_forward, roi_taps, roialign_forward, ConvGeom, RoiAlignSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn per_roi_conv(c: &mut Criterion) {
    let rois = 16;
    let geom = ConvGeom::new(&[1, 32, 16, 16], &[32, 32, 3, 3], 1, 1).unwrap();
    let inputs: Vec<Vec<f32>> = (0..rois).map(|i| random(32 * 16 * 16, i as u64)).collect();
    let weight = random(32 * 32 * 9, 99);
    let mut group = c.benchmark_group("per_roi_conv3x3");
    group.bench_function(BenchmarkId::new("rayon", rois), |b| {
        b.iter(|| map_indexed(rois, |i| conv2d_forward(black_box(&inputs[i]), &weight, None, &geom)))
    });
    group.bench_function(BenchmarkId::new("sequential", rois), |b| {
        b.iter(|| map_indexed_seq(rois, |i| conv2d_forward(black_box(&inputs[i]), &weight, None, &geom)))
    });
    group.finish();
}

fn roialign_boxes(c: &mut Criterion) {
    let (ch, h, w) = (32, 32, 32);
    let feature = random(ch * h * w, 7);
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let boxes: Vec<[f64; 4]> = (0..64)
        .map(|_| {
            let x = r.random_range(0.0..96.0);
            let y = r.random_range(0.0..96.0);
            [x, y, x + r.random_range(8.0..32.0), y + r.random_range(8.0..32.0)]
        })
        .collect();
    let spec = RoiAlignSpec {
        stride: 4.0,
        out: 8,
        sampling_ratio: 2,
    };
    let run = |i: usize| {
        let taps = [roi_taps::<f32>(boxes[i], h, w, &spec)];
        roialign_forward(&feature, ch, h, w, &taps, spec.out)
    };
    let mut group = c.benchmark_group("roialign_per_box");
    group.bench_function(BenchmarkId::new("rayon", boxes.len()), |b| b.iter(|| map_indexed(boxes.len(), run)));
    group.bench_function(BenchmarkId::new("sequential", boxes.len()), |b| {
        b.iter(|| map_indexed_seq(boxes.len(), run))
    });
    group.finish();
}

fn training_batch(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let data = synthesize(&DatasetMeta {
        num_train: cfg.batch_size,
        num_val: 1,
        ..DatasetMeta::default()
    })
    .unwrap();
    let model = Model::<f32>::new(cfg.model.clone()).unwrap();
    let step = |i: usize| {
        let aug = Augment::draw(&cfg, 0, i);
        image_step(&model, &data.train.images[i], &data.train.annotations[i], &aug, &cfg)
            .unwrap()
            .1
    };
    let image = data.train.images[0].to_input::<f32>(1.0, false).unwrap().0;
    let boxes: Vec<BBox> = data.train.annotations[0].iter().map(|a| a.bbox).collect();

    let mut group = c.benchmark_group("training_batch");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("rayon", cfg.batch_size), |b| {
        b.iter(|| map_indexed(cfg.batch_size, step))
    });
    group.bench_function(BenchmarkId::new("sequential", cfg.batch_size), |b| {
        b.iter(|| map_indexed_seq(cfg.batch_size, step))
    });
    group.bench_function("keypoint_heatmaps", |b| {
        b.iter(|| model.keypoint_heatmaps(black_box(&image), &boxes).unwrap())
    });
    group.finish();
}

criterion_group!(benches, per_roi_conv, roialign_boxes, training_batch);
criterion_main!(benches);
