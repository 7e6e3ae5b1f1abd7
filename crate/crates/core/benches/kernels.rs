//! Hot kernels. Build once with the default `parallel` feature and once with
//! `--no-default-features`; ids are identical so criterion baselines compare them.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ftdr::frequency::{dct2, frequency_representation, HighPassConfig};
use ftdr::image::Image;
use ftdr::maskdetect::{Detector, DetectorConfig};
use ftdr::rng::SplitMix64;
use ftdr::tensor::{ConvCfg, Graph, Tensor};

fn rand(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| r.uniform(-1.0, 1.0))
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for size in [32, 64] {
        let x = rand(1, &[4, 16, size, size]);
        let w = rand(2, &[16, 16, 3, 3]);
        group.bench_with_input(BenchmarkId::new("forward", size), &size, |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, ConvCfg::new(1, 1, 1));
                black_box(y.unwrap().value());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", size), &size, |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let wv = g.param(w.clone());
                let y = g.param(x.clone()).conv2d(wv, None, ConvCfg::new(1, 1, 1)).unwrap();
                g.backward(y.square().sum()).unwrap();
                black_box(g.grad(wv));
            })
        });
    }
    group.finish();
}

fn elementwise(c: &mut Criterion) {
    let x = rand(3, &[8, 32, 64, 64]);
    let m = Tensor::from_fn(&[8, 1, 64, 64], |i| f64::from(u8::from(i % 7 < 3)));
    c.bench_function("region_norm/8x32x64x64", |b| {
        b.iter(|| {
            let g = Graph::new();
            black_box(g.constant(x.clone()).region_norm(&m, 1e-5).unwrap().value());
        })
    });
    c.bench_function("softmax/8x32x64x64", |b| {
        b.iter(|| {
            let g = Graph::new();
            black_box(g.constant(x.clone()).softmax(3).unwrap().value());
        })
    });
    c.bench_function("patch_similarity/8x32x64x64", |b| {
        b.iter(|| {
            let g = Graph::new();
            black_box(g.constant(x.clone()).patch_similarity().unwrap().value());
        })
    });
}

fn frequency(c: &mut Criterion) {
    let plane = rand(4, &[256, 256]);
    c.bench_function("dct2/256", |b| b.iter(|| black_box(dct2(&plane).unwrap())));
    let mut r = SplitMix64::new(5);
    let img = Image::from_fn(256, 256, 3, |_, _, _| r.next_f64());
    let cfg = HighPassConfig::new(HighPassConfig::DEFAULT_ALPHA).unwrap();
    c.bench_function("frequency_representation/256", |b| {
        b.iter(|| black_box(frequency_representation(&img, cfg)))
    });
}

fn detector(c: &mut Criterion) {
    let det = Detector::new(DetectorConfig::toy(), 64, 64).unwrap();
    let store = det.init_store(0);
    let mut r = SplitMix64::new(6);
    let img = Image::from_fn(64, 64, 3, |_, _, _| r.next_f64());
    let mut group = c.benchmark_group("detector");
    group.sample_size(10);
    group.bench_function("detect/toy64", |b| b.iter(|| black_box(det.detect(&store, &img).unwrap())));
    group.finish();
}

criterion_group!(benches, conv, elementwise, frequency, detector);
criterion_main!(benches);
