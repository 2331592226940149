use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spt_bench::{random_keep, random_tensor, rng};
use spt_core::packing::{build_packing_plan, build_same_image_mask, pack_tokens};
use spt_core::{Graph, TokenGrid};

fn bench_packing(c: &mut Criterion) {
    let (batch, side, channels, len) = (8, 32, 64, 49);
    let x = random_tensor(&[batch, side, side, channels], &mut rng(3));
    let mut group = c.benchmark_group("packing");
    for ratio in [0.1, 0.25, 0.5] {
        let keep = random_keep(batch, side, side, ratio, &mut rng(4));
        group.bench_with_input(BenchmarkId::new("plan", ratio), &ratio, |b, _| {
            b.iter(|| build_packing_plan(&keep, len).unwrap())
        });
        let plan = build_packing_plan(&keep, len).unwrap();
        group.bench_with_input(BenchmarkId::new("mask", ratio), &ratio, |b, _| {
            b.iter(|| build_same_image_mask(&plan.slot_image(), len).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("gather", ratio), &ratio, |b, _| {
            b.iter(|| {
                let g = Graph::<f32>::new();
                let grid = TokenGrid::new(g.constant(x.clone())).unwrap();
                pack_tokens(&grid, &plan).unwrap().values.tensor()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_packing);
criterion_main!(benches);
