use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use polymer2d::moments::{second_moment_point, truncated_variance};
use polymer2d::{critical_sigma2, KernelTable};

fn tables(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernel_table");
    for n in [1 << 10, 1 << 14] {
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| KernelTable::new(black_box(n)))
        });
    }
    g.finish();
}

fn moments(c: &mut Criterion) {
    let n = 1 << 12;
    let t = KernelTable::new(n);
    let s2 = critical_sigma2(&t, n, 2.0).unwrap();
    c.bench_function("second_moment_point/4096", |b| {
        b.iter(|| second_moment_point(&t, black_box(n), s2))
    });
    c.bench_function("truncated_variance/4096/K=8", |b| {
        b.iter(|| truncated_variance(&t, black_box(n), s2, 8))
    });
}

criterion_group!(benches, tables, moments);
criterion_main!(benches);
