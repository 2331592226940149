use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use spt_bench::{random_tensor, rng};
use spt_core::numerics::{matmul, matmul_nt};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128, 256] {
        let mut r = rng(n as u64);
        let a = random_tensor(&[n, n], &mut r);
        let b = random_tensor(&[n, n], &mut r);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::new("nn", n), &n, |bench, _| bench.iter(|| matmul(&a, &b).unwrap()));
        group.bench_with_input(BenchmarkId::new("nt", n), &n, |bench, _| bench.iter(|| matmul_nt(&a, &b).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_matmul);
criterion_main!(benches);
