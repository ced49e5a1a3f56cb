use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lorafuse_core::encoder::{encode_lora, init_encoder, EncoderConfig};
use lorafuse_core::gate::{fuse_forward, init_gate, FusionActivation, GateMode};
use lorafuse_core::index::RetrievalIndex;
use lorafuse_core::lora::{random_adapter, LayerSpec};
use lorafuse_core::svd::truncated_svd;
use lorafuse_core::{SeededRng, Tensor};

fn matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::matrix(rows, cols, rng.normals(rows * cols, 1.0)).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = SeededRng::new(1);
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let a = matrix(n, n, &mut rng);
        let b = matrix(n, n, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn svd(c: &mut Criterion) {
    let mut rng = SeededRng::new(2);
    let mut group = c.benchmark_group("truncated_svd_rank4");
    for n in [16, 32, 64] {
        let m = matrix(n, n, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| truncated_svd(black_box(&m), 4).unwrap())
        });
    }
    group.finish();
}

fn encode(c: &mut Criterion) {
    let catalog: Vec<LayerSpec> = (0..4)
        .map(|i| LayerSpec::new(format!("h.{i}"), 32, 32))
        .collect();
    let params = init_encoder(&catalog, EncoderConfig::default(), 3).unwrap();
    let adapter = random_adapter("a", &catalog, 4, 4).unwrap();
    c.bench_function("encode_lora", |bench| {
        bench.iter(|| encode_lora(black_box(&adapter), &params).unwrap())
    });
}

fn fuse(c: &mut Criterion) {
    let mut rng = SeededRng::new(5);
    let d = 64;
    let mut gate = init_gate(d).unwrap();
    gate.w_o = matrix(1, d, &mut rng);
    let act = FusionActivation {
        x: matrix(256, d, &mut rng),
        branches: (0..3).map(|_| matrix(256, d, &mut rng)).collect(),
    };
    let mut group = c.benchmark_group("fuse_forward");
    for (name, mode) in [
        ("per_token", GateMode::PerToken),
        ("pooled", GateMode::Pooled),
    ] {
        group.bench_function(name, |bench| {
            bench.iter(|| fuse_forward(black_box(&act), &gate, mode).unwrap())
        });
    }
    group.finish();
}

fn query(c: &mut Criterion) {
    let mut rng = SeededRng::new(6);
    let dim = 64;
    let mut group = c.benchmark_group("query_topk");
    for n in [100, 1000, 10_000] {
        let ids = (0..n).map(|i| format!("a{i}")).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(dim, 1.0)).collect();
        let index = RetrievalIndex::from_embeddings(ids, &rows, "bench".into()).unwrap();
        let q = rng.normals(dim, 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| index.query_topk(black_box(&q), 5).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, svd, encode, fuse, query);
criterion_main!(benches);
