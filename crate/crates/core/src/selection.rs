//! Token gating, multi-scale score fusion, Gumbel selection, selection
//! labels and the select loss.

use std::path::Path;

use rand::Rng;

use crate::error::{Result, SptError};
use crate::numerics::{fixture, Real, Tensor, Var};
use crate::types::{KeepMask, LabelGrid, ScoreMap, SelectLabelPyramid, SelectionMask, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Gumbel noise is drawn; selection is stochastic.
    Train,
    /// Noise-free, deterministic selection.
    Eval,
}

/// Linear gate: one logit per token.
#[derive(Debug, Clone, Copy)]
pub struct GateParams<'g, T: Real> {
    /// `[c, 1]`
    pub weight: Var<'g, T>,
    /// `[1]`
    pub bias: Var<'g, T>,
}

pub fn gate_scores<'g, T: Real>(r: &TokenGrid<'g, T>, gate: &GateParams<'g, T>) -> Result<ScoreMap<'g, T>> {
    if gate.weight.shape() != [r.channels, 1] {
        return Err(SptError::dim(
            "gate_scores",
            format!("gate weight {:?} for {} channels", gate.weight.shape(), r.channels),
        ));
    }
    let logits = r.values.matmul(gate.weight)?.add(gate.bias)?;
    ScoreMap::new(logits)
}

/// `max(this, maxpool2x2(up))`; `this` unchanged when there is no
/// finer-scale map.
pub fn fuse_upscale<'g, T: Real>(
    this: &ScoreMap<'g, T>,
    up: Option<&ScoreMap<'g, T>>,
) -> Result<ScoreMap<'g, T>> {
    let Some(up) = up else { return Ok(*this) };
    if up.batch != this.batch || up.height != 2 * this.height || up.width != 2 * this.width {
        return Err(SptError::dim(
            "fuse_upscale",
            format!(
                "up-scale map {:?} is not twice {:?}",
                up.spatial(),
                this.spatial()
            ),
        ));
    }
    let pooled = up.logits.max_pool_2x2()?;
    ScoreMap::new(this.logits.maximum(pooled)?)
}

/// `sigmoid(s) ⊙ r`, broadcast over channels.
pub fn gate_representation<'g, T: Real>(
    r: &TokenGrid<'g, T>,
    s: &ScoreMap<'g, T>,
) -> Result<TokenGrid<'g, T>> {
    if (r.batch, r.height, r.width) != s.spatial() {
        return Err(SptError::dim(
            "gate_representation",
            format!("grid {:?} vs scores {:?}", r.values.shape(), s.spatial()),
        ));
    }
    r.with_values(s.logits.sigmoid()?.mul(r.values)?)
}

/// Standard Gumbel(0, 1) draw.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Binary Gumbel-Softmax over class logits `(s, 0)`.
///
/// The keep probability is `σ((s + g₁ − g₀)/T)` in train mode and `σ(s/T)`
/// in eval mode; a token is kept when it reaches `tau`. Noise is drawn in
/// row-major token order.
pub fn gumbel_select<'g, T: Real, R: Rng + ?Sized>(
    s: &ScoreMap<'g, T>,
    tau: f64,
    temp: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<SelectionMask<'g, T>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(SptError::Usage(format!("tau must lie in (0, 1), got {tau}")));
    }
    let g = s.logits.graph();
    let shifted = match mode {
        Mode::Eval => s.logits,
        Mode::Train => {
            let n = s.batch * s.height * s.width;
            let noise: Vec<T> = (0..n)
                .map(|_| {
                    let g1 = sample_gumbel(rng);
                    let g0 = sample_gumbel(rng);
                    T::from_f64(g1 - g0)
                })
                .collect();
            let noise = g.constant(Tensor::new(&s.logits.shape(), noise)?);
            s.logits.add(noise)?
        }
    };
    let soft = shifted.scale(1.0 / temp)?.sigmoid()?;
    let tau_t = T::from_f64(tau);
    let keep: Vec<bool> = soft.value().data().iter().map(|&p| p >= tau_t).collect();
    finish_selection(s, soft, keep)
}

/// Keeps the `ceil(fraction · N)` highest-scoring tokens of every image
/// (ties broken by position). Gradients flow through `σ(s)`.
pub fn top_fraction_select<'g, T: Real>(
    s: &ScoreMap<'g, T>,
    fraction: f64,
) -> Result<SelectionMask<'g, T>> {
    let n = s.height * s.width;
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut keep = vec![false; s.batch * n];
    {
        let v = s.logits.value();
        for b in 0..s.batch {
            let scores = &v.data()[b * n..(b + 1) * n];
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| {
                scores[j]
                    .partial_cmp(&scores[i])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(i.cmp(&j))
            });
            for &i in &order[..k] {
                keep[b * n + i] = true;
            }
        }
    }
    let soft = s.logits.sigmoid()?;
    finish_selection(s, soft, keep)
}

/// Every token kept, multiplier identically one.
pub fn select_all<'g, T: Real>(s: &ScoreMap<'g, T>) -> Result<SelectionMask<'g, T>> {
    let soft = s.logits.sigmoid()?;
    finish_selection(s, soft, vec![true; s.batch * s.height * s.width])
}

fn finish_selection<'g, T: Real>(
    s: &ScoreMap<'g, T>,
    soft: Var<'g, T>,
    keep: Vec<bool>,
) -> Result<SelectionMask<'g, T>> {
    let hard = Tensor::new(
        &soft.shape(),
        keep.iter().map(|&k| if k { T::ONE } else { T::ZERO }).collect(),
    )?;
    let multiplier = soft.straight_through(hard)?;
    Ok(SelectionMask {
        keep: KeepMask::new(s.batch, s.height, s.width, keep)?,
        soft,
        multiplier,
    })
}

// ---------------------------------------------------------------------------
// selection labels

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    Boxes(Vec<PixelBox>),
    /// Full-resolution binary mask, row-major `[H, W]`.
    Mask {
        height: usize,
        width: usize,
        pixels: Vec<bool>,
    },
}

impl Annotation {
    /// Parses `box x0 y0 x1 y1` lines.
    pub fn parse_boxes(text: &str) -> Result<Annotation> {
        let mut boxes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let nums: Option<Vec<usize>> = match parts.as_slice() {
                ["box", rest @ ..] if rest.len() == 4 => {
                    rest.iter().map(|p| p.parse().ok()).collect()
                }
                _ => None,
            };
            let Some(n) = nums else {
                return Err(SptError::Annotation(format!(
                    "line {}: expected \"box x0 y0 x1 y1\", got {line:?}",
                    i + 1
                )));
            };
            boxes.push(PixelBox {
                x0: n[0],
                y0: n[1],
                x1: n[2],
                y1: n[3],
            });
        }
        Ok(Annotation::Boxes(boxes))
    }

    pub fn boxes_text(boxes: &[PixelBox]) -> String {
        boxes
            .iter()
            .map(|b| format!("box {} {} {} {}\n", b.x0, b.y0, b.x1, b.y1))
            .collect()
    }

    /// Reads either a box text file or a `[H, W]` mask tensor fixture.
    pub fn load(path: &Path) -> Result<Annotation> {
        let bytes = std::fs::read(path).map_err(|e| SptError::io(path, e))?;
        if bytes.starts_with(fixture::MAGIC) {
            let t: Tensor<f32> = fixture::read_tensor(&mut bytes.as_slice())?;
            let [height, width] = *t.shape() else {
                return Err(SptError::Annotation(format!(
                    "mask must be [H, W], got {:?}",
                    t.shape()
                )));
            };
            Ok(Annotation::Mask {
                height,
                width,
                pixels: t.data().iter().map(|&v| v > 0.5).collect(),
            })
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| SptError::Annotation(format!("{}: not UTF-8", path.display())))?;
            Annotation::parse_boxes(&text)
        }
    }

    /// Pixel mask of this annotation on an `height × width` image.
    pub fn pixel_mask(&self, height: usize, width: usize) -> Result<Vec<bool>> {
        match self {
            Annotation::Boxes(boxes) => {
                let mut px = vec![false; height * width];
                for b in boxes {
                    if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > width || b.y1 > height {
                        return Err(SptError::Annotation(format!(
                            "box {b:?} is empty or outside the {width}x{height} image"
                        )));
                    }
                    for y in b.y0..b.y1 {
                        px[y * width + b.x0..y * width + b.x1].fill(true);
                    }
                }
                Ok(px)
            }
            Annotation::Mask {
                height: h,
                width: w,
                pixels,
            } => {
                if (*h, *w) != (height, width) || pixels.len() != h * w {
                    return Err(SptError::Annotation(format!(
                        "mask is {w}x{h}, image is {width}x{height}"
                    )));
                }
                Ok(pixels.clone())
            }
        }
    }
}

/// Multi-scale selection labels: a cell is positive iff any pixel it
/// covers is an object pixel. Level 0 reduces 8×8 pixel blocks; the
/// coarser levels are successive 2×2 max pools.
pub fn derive_select_labels(
    objects: &Annotation,
    height: usize,
    width: usize,
) -> Result<SelectLabelPyramid> {
    if !height.is_multiple_of(32) || !width.is_multiple_of(32) || height == 0 || width == 0 {
        return Err(SptError::Annotation(format!(
            "image {width}x{height} is not a multiple of 32"
        )));
    }
    let px = objects.pixel_mask(height, width)?;
    let (h0, w0) = (height / 8, width / 8);
    let mut cells = vec![false; h0 * w0];
    for y in 0..height {
        for x in 0..width {
            if px[y * width + x] {
                cells[(y / 8) * w0 + x / 8] = true;
            }
        }
    }
    SelectLabelPyramid::from_finest(LabelGrid {
        height: h0,
        width: w0,
        cells,
    })
}

/// Sum over score maps of the token-mean binary cross-entropy between
/// `σ(s)` and the label grid of the same scale.
pub fn select_loss<'g, T: Real>(terms: &[(ScoreMap<'g, T>, Var<'g, T>)]) -> Result<Var<'g, T>> {
    let mut total: Option<Var<'g, T>> = None;
    for (s, y) in terms {
        if y.shape() != s.logits.shape() {
            return Err(SptError::dim(
                "select_loss",
                format!("scores {:?} vs labels {:?}", s.logits.shape(), y.shape()),
            ));
        }
        // -[y log σ(s) + (1-y) log σ(-s)] = softplus(s) - y·s
        let bce = s.logits.softplus()?.sub(y.mul(s.logits)?)?.mean()?;
        total = Some(match total {
            Some(t) => t.add(bce)?,
            None => bce,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Err(SptError::Usage("select_loss needs at least one score map".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid<'g>(g: &'g Graph<f64>, shape: &[usize], data: &[f64]) -> Var<'g, f64> {
        g.leaf(Tensor::from_f64(shape, data).unwrap())
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn gate_scores_examples() {
        let g = Graph::new();
        let r = TokenGrid::new(grid(&g, &[1, 1, 2, 3], &[3.0, 1.0, 2.0, -1.0, 5.0, 0.0])).unwrap();
        let zero = GateParams {
            weight: grid(&g, &[3, 1], &[0.0; 3]),
            bias: grid(&g, &[1], &[0.0]),
        };
        assert_eq!(gate_scores(&r, &zero).unwrap().logits.value().data(), &[0.0, 0.0]);
        let pick = GateParams {
            weight: grid(&g, &[3, 1], &[1.0, 0.0, 0.0]),
            bias: grid(&g, &[1], &[0.0]),
        };
        assert_eq!(gate_scores(&r, &pick).unwrap().logits.value().data(), &[3.0, -1.0]);
        let bad = GateParams {
            weight: grid(&g, &[2, 1], &[1.0, 0.0]),
            bias: grid(&g, &[1], &[0.0]),
        };
        assert!(gate_scores(&r, &bad).is_err());
    }

    #[test]
    fn gate_scores_match_dot_products() {
        let g = Graph::new();
        let (b, h, w, c) = (2, 3, 2, 5);
        let data = lcg(7, b * h * w * c);
        let wv = lcg(8, c);
        let r = TokenGrid::new(grid(&g, &[b, h, w, c], &data)).unwrap();
        let gate = GateParams {
            weight: grid(&g, &[c, 1], &wv),
            bias: grid(&g, &[1], &[0.25]),
        };
        let s = gate_scores(&r, &gate).unwrap();
        for (t, &v) in s.logits.value().data().iter().enumerate() {
            let dot: f64 = (0..c).map(|j| data[t * c + j] * wv[j]).sum::<f64>() + 0.25;
            assert!((v - dot).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_examples() {
        let g = Graph::new();
        let this = ScoreMap::new(grid(&g, &[1, 1, 1, 1], &[-1.0])).unwrap();
        let up = ScoreMap::new(grid(&g, &[1, 2, 2, 1], &[0.3, -2.0, -2.0, -2.0])).unwrap();
        assert_eq!(fuse_upscale(&this, Some(&up)).unwrap().logits.value().data(), &[0.3]);
        let this = ScoreMap::new(grid(&g, &[1, 1, 1, 1], &[5.0])).unwrap();
        let up = ScoreMap::new(grid(&g, &[1, 2, 2, 1], &[-9.0; 4])).unwrap();
        assert_eq!(fuse_upscale(&this, Some(&up)).unwrap().logits.value().data(), &[5.0]);
        assert_eq!(fuse_upscale(&this, None).unwrap().logits.id(), this.logits.id());
        let wrong = ScoreMap::new(grid(&g, &[1, 4, 4, 1], &[0.0; 16])).unwrap();
        assert!(fuse_upscale(&this, Some(&wrong)).is_err());
    }

    #[test]
    fn fuse_matches_pool_then_max() {
        let g = Graph::new();
        let a = lcg(1, 16);
        let u = lcg(2, 64);
        let this = ScoreMap::new(grid(&g, &[1, 4, 4, 1], &a)).unwrap();
        let up = ScoreMap::new(grid(&g, &[1, 8, 8, 1], &u)).unwrap();
        let fused = fuse_upscale(&this, Some(&up)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(u[(2 * y + dy) * 8 + 2 * x + dx]);
                    }
                }
                let expect = a[y * 4 + x].max(m);
                assert_eq!(fused.logits.value().data()[y * 4 + x], expect);
                assert!(fused.logits.value().data()[y * 4 + x] >= a[y * 4 + x]);
            }
        }
    }

    #[test]
    fn gate_representation_examples() {
        let g = Graph::new();
        let data = lcg(3, 2 * 3);
        let r = TokenGrid::new(grid(&g, &[1, 2, 1, 3], &data)).unwrap();
        let zero = ScoreMap::new(grid(&g, &[1, 2, 1, 1], &[0.0, 0.0])).unwrap();
        let out = gate_representation(&r, &zero).unwrap();
        for (o, d) in out.values.value().data().iter().zip(&data) {
            assert_eq!(*o, 0.5 * d);
        }
        let big = ScoreMap::new(grid(&g, &[1, 2, 1, 1], &[100.0, 100.0])).unwrap();
        let out = gate_representation(&r, &big).unwrap();
        assert!(out.values.value().max_abs_diff(&r.values.value()).unwrap() < 1e-6);
        let s = lcg(4, 2);
        let sm = ScoreMap::new(grid(&g, &[1, 2, 1, 1], &s)).unwrap();
        let out = gate_representation(&r, &sm).unwrap();
        for t in 0..2 {
            let sig = 1.0 / (1.0 + (-s[t]).exp());
            for c in 0..3 {
                assert!((out.values.value().data()[t * 3 + c] - sig * data[t * 3 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gumbel_eval_examples() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ScoreMap::new(grid(&g, &[1, 1, 2, 1], &[0.0, -10.0])).unwrap();
        let m = gumbel_select(&s, 0.01, 1.0, Mode::Eval, &mut rng).unwrap();
        assert_eq!(m.keep.keep, vec![true, false]);
        assert_eq!(m.soft.value().data()[0], 0.5);
        assert!((m.soft.value().data()[1] - 4.5398e-5).abs() < 1e-8);
        assert_eq!(m.multiplier.value().data(), &[1.0, 0.0]);
        assert!(gumbel_select(&s, 1.5, 1.0, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn gumbel_train_is_seed_deterministic() {
        let scores = lcg(9, 64);
        let run = |seed| {
            let g = Graph::<f64>::new();
            let s = ScoreMap::new(g.leaf(Tensor::from_f64(&[1, 8, 8, 1], &scores).unwrap())).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = gumbel_select(&s, 0.3, 1.0, Mode::Train, &mut rng).unwrap();
            (m.keep.keep.clone(), m.soft.tensor())
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42).1, run(43).1);
    }

    #[test]
    fn top_fraction_keeps_exact_share() {
        let g = Graph::new();
        let s = ScoreMap::new(grid(&g, &[2, 2, 2, 1], &[4.0, 3.0, 2.0, 1.0, -1.0, 5.0, 5.0, 0.0])).unwrap();
        let m = top_fraction_select(&s, 0.5).unwrap();
        assert_eq!(m.keep.keep, vec![true, true, false, false, false, true, true, false]);
        assert_eq!(m.keep.ratio(), 0.5);
    }

    #[test]
    fn labels_examples() {
        let empty = derive_select_labels(&Annotation::Boxes(vec![]), 256, 256).unwrap();
        assert!(empty.levels.iter().all(|l| l.positives() == 0));
        let quad = derive_select_labels(
            &Annotation::Boxes(vec![PixelBox { x0: 0, y0: 0, x1: 128, y1: 128 }]),
            256,
            256,
        )
        .unwrap();
        let l0 = &quad.levels[0];
        assert_eq!((l0.height, l0.width), (32, 32));
        assert_eq!(l0.positives(), 256);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(l0.get(y, x), y < 16 && x < 16);
            }
        }
        assert!(quad.is_nested());
        let bad = Annotation::Boxes(vec![PixelBox { x0: 0, y0: 0, x1: 300, y1: 10 }]);
        assert!(derive_select_labels(&bad, 256, 256).is_err());
    }

    #[test]
    fn labels_match_any_pixel_oracle() {
        let (h, w) = (64, 32);
        let noise = lcg(11, h * w);
        let pixels: Vec<bool> = noise.iter().map(|&v| v > 0.97).collect();
        let ann = Annotation::Mask { height: h, width: w, pixels: pixels.clone() };
        let p = derive_select_labels(&ann, h, w).unwrap();
        for (lvl, block) in [(0usize, 8usize), (1, 16), (2, 32)] {
            let grid = &p.levels[lvl];
            for cy in 0..h / block {
                for cx in 0..w / block {
                    let any = (0..block).any(|dy| {
                        (0..block).any(|dx| pixels[(cy * block + dy) * w + cx * block + dx])
                    });
                    assert_eq!(grid.get(cy, cx), any, "level {lvl} cell {cy},{cx}");
                }
            }
        }
    }

    #[test]
    fn box_text_parses() {
        let a = Annotation::parse_boxes("box 1 2 3 4\n\nbox 0 0 8 8\n").unwrap();
        assert_eq!(
            a,
            Annotation::Boxes(vec![
                PixelBox { x0: 1, y0: 2, x1: 3, y1: 4 },
                PixelBox { x0: 0, y0: 0, x1: 8, y1: 8 }
            ])
        );
        assert!(Annotation::parse_boxes("circle 1 2 3").is_err());
        if let Annotation::Boxes(b) = &a {
            assert_eq!(Annotation::parse_boxes(&Annotation::boxes_text(b)).unwrap(), a);
        }
    }

    #[test]
    fn select_loss_examples() {
        let g = Graph::new();
        let s = ScoreMap::new(grid(&g, &[1, 2, 2, 1], &[0.0; 4])).unwrap();
        let y = g.constant(Tensor::full(&[1, 2, 2, 1], 1.0));
        let l = select_loss(&[(s, y)]).unwrap();
        assert!((l.value().data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let s = ScoreMap::new(grid(&g, &[1, 1, 2, 1], &[100.0, -100.0])).unwrap();
        let y = g.constant(Tensor::from_f64(&[1, 1, 2, 1], &[1.0, 0.0]).unwrap());
        assert!(select_loss(&[(s, y)]).unwrap().value().data()[0] < 1e-6);

        let wrong = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(select_loss(&[(s, wrong)]).is_err());
    }

    #[test]
    fn select_loss_matches_bce_loop() {
        let g = Graph::new();
        let sv = lcg(5, 2 * 4 * 4).iter().map(|v| v * 4.0).collect::<Vec<_>>();
        let yv: Vec<f64> = lcg(6, 32).iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let s = ScoreMap::new(grid(&g, &[2, 4, 4, 1], &sv)).unwrap();
        let y = g.constant(Tensor::from_f64(&[2, 4, 4, 1], &yv).unwrap());
        let s2 = ScoreMap::new(grid(&g, &[2, 2, 2, 1], &sv[..8])).unwrap();
        let y2 = g.constant(Tensor::from_f64(&[2, 2, 2, 1], &yv[..8]).unwrap());
        let l = select_loss(&[(s, y), (s2, y2)]).unwrap().value().data()[0];
        let bce = |s: &[f64], y: &[f64]| {
            s.iter()
                .zip(y)
                .map(|(&s, &y)| {
                    let p = 1.0 / (1.0 + (-s).exp());
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / s.len() as f64
        };
        let expect = bce(&sv, &yv) + bce(&sv[..8], &yv[..8]);
        assert!((l - expect).abs() < 1e-6, "{l} vs {expect}");
        assert!(l >= 0.0);
    }
}
