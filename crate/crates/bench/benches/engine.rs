use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stepforge_bench::{completion, label_pairs, tree};
use stepforge_core::analysis::{normalize_code, split_blocks};
use stepforge_core::harness::{label_universe, metric_f1, metric_hamming};
use stepforge_core::mcts::{pucb, select};
use stepforge_core::AgentConfig;

fn bench_pucb(c: &mut Criterion) {
    c.bench_function("pucb", |b| {
        b.iter(|| pucb(black_box(0.5), black_box(0.6), black_box(2), black_box(10), 10.0, 4.0))
    });
    let cfg = AgentConfig::default();
    let mut group = c.benchmark_group("select");
    for (depth, branching) in [(3, 3), (4, 6), (6, 3)] {
        let t = tree(depth, branching);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{depth}x{branching}")), &t, |b, t| {
            b.iter(|| select(black_box(t), &cfg))
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let mut group = c.benchmark_group("metrics");
    for n in [50, 1000] {
        let pairs = label_pairs(n, 8);
        let universe = label_universe(&pairs);
        group.bench_with_input(BenchmarkId::new("f1", n), &pairs, |b, p| {
            b.iter(|| metric_f1(black_box(p)))
        });
        group.bench_with_input(BenchmarkId::new("hamming", n), &pairs, |b, p| {
            b.iter(|| metric_hamming(black_box(p), &universe))
        });
    }
    group.finish();
}

fn bench_blocks(c: &mut Criterion) {
    let text = completion(20);
    c.bench_function("split_blocks", |b| b.iter(|| split_blocks(black_box(&text))));
    let code = split_blocks(&text).join("\n");
    c.bench_function("normalize_code", |b| b.iter(|| normalize_code(black_box(&code))));
}

criterion_group!(benches, bench_pucb, bench_metrics, bench_blocks);
criterion_main!(benches);
