use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use tpo_core::exec::Execution;
use tpo_core::tabular::{sampled_gradient, BanditSpec, LogitTable, TabularMethod};

fn sampled(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let table = LogitTable::standard_normal(256, 100, &mut rng);
    let spec = BanditSpec::random(256, 100, &mut rng);
    let mut group = c.benchmark_group("tabular_sampled_tpo");
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                sampled_gradient(&table, &spec, TabularMethod::Tpo, 100, 1.0, black_box(7), exec).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, sampled);
criterion_main!(benches);
