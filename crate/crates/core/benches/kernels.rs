use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use hemogan::data::{image_batch, Sample};
use hemogan::exec::Exec;
use hemogan::metrics::predict_masks;
use hemogan::nn::{build_segmenter, ForwardCtx, Mode, NetworkSpec};
use hemogan::phantom::{generate_dataset, generate_dataset_with};
use hemogan::rng::seeded;
use hemogan::tensor::kernels::{conv_backward_data, conv_backward_filter, conv_forward, ConvGeom};
use hemogan::tensor::{Tape, Tensor};

fn strategies() -> Vec<(&'static str, Exec)> {
    #[allow(unused_mut)]
    let mut v = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Exec::Parallel));
    v
}

fn conv(c: &mut Criterion) {
    let g = ConvGeom { channels: 16, height: 32, width: 32, filters: 32, kernel: 4, stride: 2, pad: 1 };
    let batch = 8;
    let mut rng = seeded(1);
    let x = Tensor::randn(&[batch * 16 * 32 * 32], 1.0, &mut rng);
    let w = Tensor::randn(&[32 * 16 * 16], 0.1, &mut rng);
    let dy = Tensor::randn(&[batch * 32 * 16 * 16], 1.0, &mut rng);
    let mut group = c.benchmark_group("conv_4x4_s2");
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| conv_forward(exec, black_box(x.data()), batch, w.data(), &g))
        });
        group.bench_function(BenchmarkId::new("backward_data", name), |b| {
            b.iter(|| conv_backward_data(exec, black_box(dy.data()), batch, w.data(), &g))
        });
        group.bench_function(BenchmarkId::new("backward_filter", name), |b| {
            b.iter(|| conv_backward_filter(exec, black_box(x.data()), dy.data(), batch, &g))
        });
    }
    group.finish();
}

fn segmenter_step(c: &mut Criterion) {
    let ds = generate_dataset(2, 1, 64, 3).unwrap();
    let batch: Vec<&Sample> = ds.train.iter().take(4).collect();
    let input = image_batch(&batch, 64, false);
    let target: Vec<usize> = batch.iter().flat_map(|s| s.mask.iter().map(|&m| m as usize)).collect();
    let seg = build_segmenter(NetworkSpec::segmenter(64, 8), 1).unwrap();
    let mut group = c.benchmark_group("segmenter_fwd_bwd_b4");
    group.sample_size(10);
    for (name, exec) in strategies() {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut rng = seeded(0);
                let mut tape = Tape::with_exec(exec);
                let bound = seg.bind(&mut tape, true);
                let x = tape.constant(input.clone());
                let mut ctx = ForwardCtx::new(Mode::Train, &mut rng);
                let logits = seg.forward(&mut tape, &bound, x, &mut ctx).unwrap();
                let loss = tape.softmax_cross_entropy(logits, &target, None).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn per_item(c: &mut Criterion) {
    let ds = generate_dataset(2, 1, 64, 3).unwrap();
    let seg = build_segmenter(NetworkSpec::segmenter(64, 8), 1).unwrap();
    let images: Vec<&[f64]> = ds.train.iter().take(16).map(|s| s.image.as_slice()).collect();
    let mut group = c.benchmark_group("per_item");
    group.sample_size(10);
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::new("phantom_8_patients", name), |b| {
            b.iter(|| generate_dataset_with(exec, 8, 0, 64, black_box(5)).unwrap())
        });
        group.bench_function(BenchmarkId::new("predict_16", name), |b| {
            b.iter(|| predict_masks(&seg, black_box(&images), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, segmenter_step, per_item);
criterion_main!(benches);
