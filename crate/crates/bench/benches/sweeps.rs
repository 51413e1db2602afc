use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use polymer2d::engine::{partition_field, CounterField, Coupling};
use polymer2d::mc::default_window;
use polymer2d::{DisorderModel, Family, MassFunction, Site};

fn windowed_sweep(c: &mut Criterion) {
    let f = MassFunction::dirac(Site::ORIGIN);
    let opts = default_window(&f);
    let mut g = c.benchmark_group("partition_field");
    g.sample_size(20);
    for family in [Family::Gaussian, Family::Rademacher, Family::BoundedUniform] {
        let model = DisorderModel::new(family);
        let coupling = Coupling::new(&model, 0.5).unwrap();
        let mut replica = 0;
        g.bench_with_input(
            BenchmarkId::new(family.to_string(), 1024),
            &1024,
            |b, &n| {
                b.iter(|| {
                    replica += 1;
                    let env = CounterField::new(model, 7, replica);
                    partition_field(&env, &coupling, &f, black_box(n), &opts).unwrap()
                })
            },
        );
    }
    g.finish();
}

criterion_group!(benches, windowed_sweep);
criterion_main!(benches);
