//! Criterion benchmarks for the hot paths: dense matmul, a full model
//! forward pass, Pearson correlation, and a KernelSHAP solve.

use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ignnet_core::graph::{build_feature_graph, pearson_matrix};
use ignnet_core::model::{init_params, predict, ArchitectureConfig, HeadKind};
use ignnet_core::shap::kernel_shap;
use ignnet_core::tensor::Tensor;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random_matrix(&mut rng, 256, 128);
    let b = random_matrix(&mut rng, 128, 128);
    c.bench_function("matmul_256x128x128", |bench| {
        bench.iter(|| black_box(a.matmul(&b).unwrap()))
    });
}

fn bench_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 20usize;
    let rows = 64usize;
    let data: Vec<f64> = (0..200 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let corr = pearson_matrix(&data, 200, n).unwrap();
    let names = (0..n).map(|i| format!("f{i}")).collect();
    let graph = build_feature_graph(&corr, 10.0, names).unwrap();
    let adj = Arc::new(Tensor::matrix(n, n, graph.normalized.clone()).unwrap());
    let config = ArchitectureConfig::standard(6, 2, HeadKind::Interpretable).unwrap();
    let params = init_params(&config, n, 0).unwrap();
    let x = random_matrix(&mut rng, rows, n);
    c.bench_function("forward_batch64_nodes20", |bench| {
        bench.iter(|| black_box(predict(&config, &params, &adj, &x).unwrap()))
    });
}

fn bench_pearson(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 40usize;
    let rows = 2000usize;
    let data: Vec<f64> = (0..rows * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    c.bench_function("pearson_2000x40", |bench| {
        bench.iter(|| black_box(pearson_matrix(&data, rows, n).unwrap()))
    });
}

fn bench_kernel_shap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 12usize;
    let linear: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let scorer = move |x: &[f64]| {
        linear
            .iter()
            .zip(x)
            .map(|(c, v)| c * v + (v * 1.3).tanh())
            .sum::<f64>()
    };
    let instance: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
    let background = vec![0.5; m];
    c.bench_function("kernel_shap_m12_s512", |bench| {
        bench.iter(|| black_box(kernel_shap(&scorer, &instance, &background, 512, 0).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_forward,
    bench_pearson,
    bench_kernel_shap
);
criterion_main!(benches);
