use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use labo_bench::{candidate_pools, planted};
use labo_core::submodular_select::{greedy_select, greedy_select_naive, select_bottleneck};
use labo_core::SubmodularConfig;

fn greedy(c: &mut Criterion) {
    let mut group = c.benchmark_group("greedy_select");
    for distractors in [45, 195] {
        let data = planted(distractors);
        let pool = &candidate_pools(&data)[0];
        let cfg = SubmodularConfig { k: 10, beta: 0.02, ..Default::default() };
        group.bench_with_input(BenchmarkId::new("accelerated", pool.len()), pool, |b, pool| {
            b.iter(|| greedy_select(black_box(pool), &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("naive", pool.len()), pool, |b, pool| {
            b.iter(|| greedy_select_naive(black_box(pool), &cfg).unwrap())
        });
    }
    group.finish();
}

fn bottleneck(c: &mut Criterion) {
    let data = planted(195);
    let pools = candidate_pools(&data);
    let cfg = SubmodularConfig { k: 50, ..Default::default() };
    c.bench_function("select_bottleneck/10x200/k50", |b| {
        b.iter(|| select_bottleneck(black_box(&pools), &cfg).unwrap())
    });
}

criterion_group!(benches, greedy, bottleneck);
criterion_main!(benches);
