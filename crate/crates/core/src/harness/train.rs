//! SGD training loop, evaluation and per-epoch metrics.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Result, SptError};
use crate::harness::data::{stack_images, SparseSample};
use crate::model::{select_ratio_report, total_loss, SptModel};
use crate::numerics::macs::MacCounts;
use crate::numerics::{macs, Graph, Real};
use crate::selection::Mode;
use crate::types::SelectLabelPyramid;

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_task: f64,
    pub l_select: f64,
    pub l_total: f64,
    /// Training top-1 accuracy over the epoch.
    pub top1: f64,
    /// Mean select ratio of every SPA block over the epoch.
    pub ratios: Vec<f64>,
    pub ratio_mean: f64,
    /// Forward-pass MACs of the epoch.
    pub macs: MacCounts,
}

pub fn train_csv_header(blocks: usize) -> String {
    let mut h = String::from("epoch,l_task,l_select,l_total,top1");
    for b in 1..=blocks {
        let _ = write!(h, ",ratio_block_{b}");
    }
    h.push_str(",ratio_mean,macs");
    h
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{}",
            self.epoch, self.l_task, self.l_select, self.l_total, self.top1
        );
        for r in &self.ratios {
            let _ = write!(s, ",{r}");
        }
        let _ = write!(s, ",{},{}", self.ratio_mean, self.macs.total());
        s
    }
}

/// SGD with momentum: `v ← μv + g`, `θ ← θ − ηv`, with optional global
/// norm clipping of `g`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub clip_norm: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(tc: &TrainConfig) -> Self {
        Sgd {
            momentum: tc.momentum,
            clip_norm: tc.clip_norm,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut SptModel<f32>, grads: &[Option<Vec<f32>>], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = model.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        }
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter().map(|&x| f64::from(x) * f64::from(x)))
            .sum::<f64>()
            .sqrt();
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm {
            (self.clip_norm / norm) as f32
        } else {
            1.0
        };
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let v = &mut self.velocity[i];
            let p = model.params.tensor_mut(crate::model::ParamId(i)).data_mut();
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + clip * g;
                *p -= lr * *v;
            }
        }
    }
}

/// Cosine decay from `lr` to zero over `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    0.5 * lr * (1.0 + (PI * step as f64 / total as f64).cos())
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Default)]
struct Accum {
    task: f64,
    select: f64,
    total: f64,
    correct: usize,
    seen: usize,
    steps: usize,
    ratios: Vec<f64>,
    macs: MacCounts,
}

impl Accum {
    fn add_ratios(&mut self, per_block: &[f64], weight: usize) {
        if self.ratios.is_empty() {
            self.ratios = vec![0.0; per_block.len()];
        }
        for (a, r) in self.ratios.iter_mut().zip(per_block) {
            *a += r * weight as f64;
        }
    }

    fn finish_ratios(&self) -> (Vec<f64>, f64) {
        let ratios: Vec<f64> = self.ratios.iter().map(|r| r / self.seen.max(1) as f64).collect();
        let mean = if ratios.is_empty() {
            1.0
        } else {
            ratios.iter().sum::<f64>() / ratios.len() as f64
        };
        (ratios, mean)
    }
}

/// Trains in place and returns one [`EpochMetrics`] per epoch; `on_epoch`
/// sees each as soon as it completes. Shuffling and Gumbel noise come from
/// streams of the model seed, so a run is reproducible.
pub fn train(
    model: &mut SptModel<f32>,
    data: &[SparseSample],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if tc.batch_size == 0 {
        return Err(SptError::Usage("batch size must be positive".into()));
    }
    if data.is_empty() && tc.epochs > 0 {
        return Err(SptError::Usage("no training samples".into()));
    }
    let mut shuffle = ChaCha8Rng::seed_from_u64(model.cfg.seed);
    shuffle.set_stream(SHUFFLE_STREAM);
    let mut noise = ChaCha8Rng::seed_from_u64(model.cfg.seed);
    noise.set_stream(NOISE_STREAM);
    let steps_per_epoch = data.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    let mut opt = Sgd::new(tc);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let alpha = model.cfg.alpha;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut shuffle);
        let mut acc = Accum::default();
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let step = (epoch - 1) * steps_per_epoch + bi;
            let batch: Vec<&SparseSample> = chunk.iter().map(|&i| &data[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|s| s.class_id).collect();
            let labels: Vec<&SelectLabelPyramid> = batch.iter().map(|s| &s.pyramid).collect();
            let x = stack_images(&batch)?;
            let diverged = |loss: f64, task: f64, select: f64| SptError::Diverged {
                epoch,
                step,
                loss,
                task,
                select,
            };
            let g = Graph::new();
            let (fwd, counts) = macs::measure(|| model.forward(&g, &x, Mode::Train, &mut noise));
            let out = fwd.map_err(|e| match e {
                SptError::NonFinite { .. } => diverged(f64::NAN, f64::NAN, f64::NAN),
                e => e,
            })?;
            let terms = total_loss(&out, &targets, Some(&labels), alpha)?;
            let (l, t, s) = (
                terms.total.value().item()? as f64,
                terms.task.value().item()? as f64,
                terms.select.value().item()? as f64,
            );
            if !l.is_finite() {
                return Err(diverged(l, t, s));
            }
            let grads = g.backward(terms.total).map_err(|e| match e {
                SptError::NonFinite { .. } => diverged(l, t, s),
                e => e,
            })?;
            let flat: Vec<Option<Vec<f32>>> = out
                .params
                .vars()
                .iter()
                .map(|&v| grads.get(v).map(|t| t.into_data()))
                .collect();
            opt.step(model, &flat, cosine_lr(tc.lr, step, total_steps));

            let n = batch.len();
            {
                let logits = out.logits.value();
                let k = logits.shape()[1];
                for (row, &y) in logits.data().chunks(k).zip(&targets) {
                    acc.correct += usize::from(argmax(row) == y);
                }
            }
            acc.add_ratios(&select_ratio_report(&out.block_keeps).per_block, n);
            acc.task += t * n as f64;
            acc.select += s * n as f64;
            acc.total += l * n as f64;
            acc.seen += n;
            acc.steps += 1;
            acc.macs = acc.macs + counts;
        }
        let (ratios, ratio_mean) = acc.finish_ratios();
        let seen = acc.seen.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            l_task: acc.task / seen,
            l_select: acc.select / seen,
            l_total: acc.total / seen,
            top1: acc.correct as f64 / seen,
            ratios,
            ratio_mean,
            macs: acc.macs,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub l_task: f64,
    /// Per SPA block, over all evaluated images.
    pub ratios: Vec<f64>,
    pub ratio_mean: f64,
    pub macs: MacCounts,
    pub images: usize,
}

impl EvalMetrics {
    pub fn attention_macs_per_image(&self) -> f64 {
        self.macs.attention as f64 / self.images.max(1) as f64
    }
}

/// Noise-free forward passes over `data` in fixed order.
pub fn evaluate(model: &SptModel<f32>, data: &[SparseSample], batch_size: usize) -> Result<EvalMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed);
    let mut acc = Accum::default();
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&SparseSample> = chunk.iter().collect();
        let targets: Vec<usize> = batch.iter().map(|s| s.class_id).collect();
        let x = stack_images(&batch)?;
        let g = Graph::new();
        let (out, counts) = macs::measure(|| model.forward(&g, &x, Mode::Eval, &mut rng));
        let out = out?;
        let task = out.logits.cross_entropy(&targets)?.value().item()? as f64;
        {
            let logits = out.logits.value();
            let k = logits.shape()[1];
            for (row, &y) in logits.data().chunks(k).zip(&targets) {
                acc.correct += usize::from(argmax(row) == y);
            }
        }
        acc.add_ratios(&select_ratio_report(&out.block_keeps).per_block, batch.len());
        acc.task += task * batch.len() as f64;
        acc.seen += batch.len();
        acc.macs = acc.macs + counts;
    }
    let (ratios, ratio_mean) = acc.finish_ratios();
    Ok(EvalMetrics {
        accuracy: acc.correct as f64 / acc.seen.max(1) as f64,
        l_task: acc.task / acc.seen.max(1) as f64,
        ratios,
        ratio_mean,
        macs: acc.macs,
        images: acc.seen,
    })
}
