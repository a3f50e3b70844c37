//! Parallel (rayon pool) versus sequential (one-thread pool) throughput of
//! the row-parallel kernels. Build with `--no-default-features` to time the
//! pure sequential fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dydila_core::attention::{
    linear_attention, multihead_forward, softmax_attention, DwcParams, DydilaParams, Grid, HeadParams, Variant,
};
use dydila_core::kernels::FeatureMap;
use dydila_core::par;
use dydila_core::projection::ProjectorBank;
use dydila_core::{Matrix, SeededRng};

const D: usize = 64;

fn block(n: usize, rng: &mut SeededRng) -> DydilaParams<f32> {
    DydilaParams {
        projectors: ProjectorBank::random(D, 3, rng).unwrap(),
        heads: vec![HeadParams::random(D, 9, 9, 3.0, 0.01, rng).unwrap()],
        dwc: Some(dydila_core::attention::reparam_merge(&DwcParams::random(D, true, rng))),
        use_merged: true,
        grid: Grid::near_square(n),
        normalize: false,
        variant: Variant::TokenWise,
    }
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn run<R: Send>(sequential: bool, f: impl FnOnce() -> R + Send) -> R {
    if sequential {
        par::run_sequential(f)
    } else {
        f()
    }
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = SeededRng::new(1);
    let a: Matrix<f32> = rng.uniform_matrix(256, 256, 1.0);
    let b: Matrix<f32> = rng.uniform_matrix(256, 256, 1.0);
    let mut group = c.benchmark_group("matmul_256");
    for (name, seq) in modes() {
        group.bench_function(name, |bench| bench.iter(|| run(seq, || a.matmul(&b).unwrap())));
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = SeededRng::new(2);
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for n in [1024usize, 4096] {
        let q: Matrix<f32> = rng.uniform_matrix(n, D, 1.0);
        let k: Matrix<f32> = rng.uniform_matrix(n, D, 1.0);
        let v: Matrix<f32> = rng.uniform_matrix(n, D, 1.0);
        let x: Matrix<f32> = rng.uniform_matrix(n, D, 1.0);
        let params = block(n, &mut rng);
        for (name, seq) in modes() {
            group.bench_with_input(BenchmarkId::new(format!("linear/{name}"), n), &n, |bench, _| {
                bench.iter(|| run(seq, || linear_attention(&q, &k, &v, &FeatureMap::Focused(3.0)).unwrap()))
            });
            group.bench_with_input(BenchmarkId::new(format!("dydila/{name}"), n), &n, |bench, _| {
                bench.iter(|| run(seq, || multihead_forward(&x, &params).unwrap()))
            });
            if n <= 1024 {
                group.bench_with_input(BenchmarkId::new(format!("softmax/{name}"), n), &n, |bench, _| {
                    bench.iter(|| run(seq, || softmax_attention(&q, &k, &v).unwrap()))
                });
            }
        }
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_attention);
criterion_main!(benches);
