use ckn_bench::{image_arch, images};
use ckn_core::ckmap::Evaluator;
use ckn_core::gram::{compute_gram, GramOptions};
use ckn_core::kernel_eval;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn kernel_eval_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel_eval");
    for side in [8usize, 16] {
        let arch = image_arch(side);
        let xs = images(&arch, 2, 1);
        group.bench_with_input(BenchmarkId::new("two_layer_exp", side), &side, |b, _| {
            b.iter(|| kernel_eval(&arch, black_box(&xs[0]), black_box(&xs[1])).unwrap())
        });
        let ev = Evaluator::new(&arch);
        let ca = ev.self_cache(&xs[0]).unwrap();
        let cb = ev.self_cache(&xs[1]).unwrap();
        group.bench_with_input(BenchmarkId::new("cached", side), &side, |b, _| {
            b.iter(|| ev.eval_cached(&xs[0], &ca, &xs[1], &cb).unwrap())
        });
    }
    group.finish();
}

fn gram_tile_bench(c: &mut Criterion) {
    let arch = image_arch(8);
    let xs = images(&arch, 32, 2);
    let mut group = c.benchmark_group("gram_tile");
    group.sample_size(10);
    for workers in [1usize, 4] {
        let opts = GramOptions { tile: 32, workers, ..Default::default() };
        group.bench_with_input(BenchmarkId::new("n32_tile32", workers), &workers, |b, _| {
            b.iter(|| compute_gram(&arch, &xs, 0, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernel_eval_bench, gram_tile_bench);
criterion_main!(benches);
