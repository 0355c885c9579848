//! Parallel-vs-sequential timings for the four hot paths that fan out over
//! rayon: tape matmul, the MMD cross-kernel sum, k-means cluster gathering,
//! and the curvature grid. Every case runs twice, once on the default rayon
//! pool and once pinned to a single thread through `par::run_sequential`,
//! so one report shows what the data parallelism buys on this machine. The
//! two paths produce bit-identical numbers by construction; the benches
//! assert nothing beyond finiteness and only measure time.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::hint::black_box;

use rnf_core::divergences::{mmd_gaussian, SampleSet, SampleSource};
use rnf_core::flows::{FlowStack, PlanarFlowParams};
use rnf_core::geometry::curvature_grid;
use rnf_core::par::run_sequential;
use rnf_core::rnf::gather_clusters;
use rnf_core::{Tape, Tensor};

fn randn(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.random::<f64>() - 0.5;
            2.0 * u
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(11);
    let a = randn(&mut rng, 192, 192);
    let b = randn(&mut rng, 192, 192);
    let run = |a: &Tensor, b: &Tensor| {
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone(), true);
        let vb = tape.leaf(b.clone(), true);
        let m = tape.matmul(va, vb).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        tape.value(s).item()
    };

    let mut g = c.benchmark_group("matmul_192_fwd_bwd");
    g.bench_function("parallel", |bch| bch.iter(|| black_box(run(&a, &b))));
    g.bench_function("sequential", |bch| {
        bch.iter(|| black_box(run_sequential(|| run(&a, &b))))
    });
    g.finish();
}

fn bench_mmd(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(12);
    let x = SampleSet::new(randn(&mut rng, 512, 16), SampleSource::AggregatePosterior).unwrap();
    let y = SampleSet::new(randn(&mut rng, 512, 16), SampleSource::Prior).unwrap();

    let mut g = c.benchmark_group("mmd_512x16");
    g.bench_function("parallel", |bch| {
        bch.iter(|| black_box(mmd_gaussian(&x, &y).unwrap()))
    });
    g.bench_function("sequential", |bch| {
        bch.iter(|| black_box(run_sequential(|| mmd_gaussian(&x, &y).unwrap())))
    });
    g.finish();
}

fn bench_gather_clusters(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(13);
    let codes = randn(&mut rng, 4096, 8);

    let mut g = c.benchmark_group("gather_clusters_4096x8_k32");
    g.bench_function("parallel", |bch| {
        bch.iter(|| black_box(gather_clusters(&codes, 32, 7).unwrap()))
    });
    g.bench_function("sequential", |bch| {
        bch.iter(|| black_box(run_sequential(|| gather_clusters(&codes, 32, 7).unwrap())))
    });
    g.finish();
}

fn bench_curvature_grid(c: &mut Criterion) {
    let stack = FlowStack::new(vec![
        PlanarFlowParams::from_slices(&[1.4, -0.8], &[0.7, 0.6], 0.2).unwrap(),
        PlanarFlowParams::from_slices(&[-0.9, 1.1], &[0.5, -0.8], -0.3).unwrap(),
        PlanarFlowParams::from_slices(&[0.6, 0.9], &[-0.6, 0.7], 0.1).unwrap(),
    ])
    .unwrap();
    let axis: Vec<f64> = (0..96).map(|i| -3.0 + 6.0 * i as f64 / 95.0).collect();

    let mut g = c.benchmark_group("curvature_grid_96x96");
    g.bench_function("parallel", |bch| {
        bch.iter(|| black_box(curvature_grid(&stack, &axis, &axis).unwrap()))
    });
    g.bench_function("sequential", |bch| {
        bch.iter(|| {
            black_box(run_sequential(|| curvature_grid(&stack, &axis, &axis).unwrap()))
        })
    });
    g.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_mmd,
    bench_gather_clusters,
    bench_curvature_grid
);
criterion_main!(benches);
