//! One forward pass of a window block against an SPA block on the same
//! grid, with the SPA block keeping a fixed fraction of tokens.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spt_bench::{random_tensor, rng};
use spt_core::attention::{spa_block, window_attention_block, BlockParams};
use spt_core::{GateParams, Graph, Mode, ModelConfig, SelectionPolicy, Tensor, TokenGrid};

const BATCH: usize = 4;
const SIDE: usize = 16;
const CHANNELS: usize = 32;
const HEADS: usize = 4;
const WINDOW: usize = 4;

fn bench_blocks(c: &mut Criterion) {
    let x = random_tensor(&[BATCH, SIDE, SIDE, CHANNELS], &mut rng(1));
    let mut group = c.benchmark_group("block_forward");

    group.bench_function("window", |b| {
        b.iter(|| {
            let g = Graph::<f32>::new();
            let p = BlockParams::random(&g, CHANNELS, HEADS, Some(WINDOW), &mut rng(2)).unwrap();
            let grid = TokenGrid::new(g.constant(x.clone())).unwrap();
            window_attention_block(&grid, &p, false, WINDOW).unwrap().values.tensor()
        })
    });

    for fraction in [0.1, 0.25, 0.5, 1.0] {
        let cfg = ModelConfig {
            window: WINDOW,
            package_len: WINDOW * WINDOW,
            selection: SelectionPolicy::TopFraction(fraction),
            ..ModelConfig::micro()
        };
        group.bench_with_input(BenchmarkId::new("spa", fraction), &fraction, |b, _| {
            b.iter(|| {
                let g = Graph::<f32>::new();
                let mut r = rng(2);
                let p = BlockParams::random(&g, CHANNELS, HEADS, None, &mut r).unwrap();
                let gate = GateParams {
                    weight: g.constant(random_tensor(&[CHANNELS, 1], &mut r)),
                    bias: g.constant(Tensor::zeros(&[1])),
                };
                let grid = TokenGrid::new(g.constant(x.clone())).unwrap();
                let out = spa_block(&grid, None, &p, &gate, &cfg, false, Mode::Eval, &mut r).unwrap();
                out.grid.values.tensor()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_blocks);
criterion_main!(benches);
