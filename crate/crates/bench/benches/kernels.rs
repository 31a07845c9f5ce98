use criterion::{criterion_group, criterion_main, Criterion};
use crowdflux::kernels::{psi_pm, tabulate, CircleKernel};
use crowdflux::{AvoidanceParams, QuadratureSpec, Side};
use crowdflux_bench::default_table;
use std::hint::black_box;

fn kernels(c: &mut Criterion) {
    let p = AvoidanceParams::default();
    let q = QuadratureSpec::default();
    c.bench_function("psi_pm at s=1", |b| {
        b.iter(|| psi_pm(black_box(1.0), Side::Both, &p, &q))
    });
    let mut g = c.benchmark_group("tabulate");
    g.sample_size(10);
    g.bench_function("16 nodes", |b| b.iter(|| tabulate(&p, &q, black_box(16))));
    g.finish();

    let table = default_table();
    c.bench_function("table eval", |b| {
        b.iter(|| {
            (0..200)
                .map(|i| table.eval(black_box(i as f64 * 0.01), Side::Both))
                .sum::<f64>()
        })
    });
    let kernel = CircleKernel::new(&table, Side::Both, 128);
    let density = vec![1.0 / 128.0; 128];
    let mut out = vec![0.0; 128];
    c.bench_function("circle kernel apply, 128 nodes", |b| {
        b.iter(|| kernel.apply_add(black_box(&density), 1.0, &mut out))
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
