//! Transformer blocks: Swin-style (shifted) window attention, the
//! select-and-pack attention (SPA) block, and SPA stages.
//!
//! All blocks are pre-norm. A window block computes
//! `h = x + WMSA(LN₁(x))`, `out = h + FFN(LN₂(h))`. An SPA block gates every
//! token, packs the selected ones into containers of `L` slots, runs masked
//! attention inside the containers and writes the results back; negatives
//! skip attention but still pass through the FFN.

use std::sync::Arc;

use rand::Rng;

use crate::config::{ModelConfig, SelectionPolicy};
use crate::error::{Result, SptError};
use crate::numerics::macs::{self, MacCategory};
use crate::numerics::{ExclusionMask, Graph, Real, Tensor, Var};
use crate::packing::{self, PackedBatch, PackingPlan};
use crate::selection::{self, GateParams, Mode};
use crate::types::{KeepMask, ScoreMap, TokenGrid};

/// FFN hidden width relative to the block width.
pub const FFN_EXPANSION: usize = 4;

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams<'g, T: Real> {
    pub heads: usize,
    pub ln1_gamma: Var<'g, T>,
    pub ln1_beta: Var<'g, T>,
    pub wq: Var<'g, T>,
    pub bq: Var<'g, T>,
    pub wk: Var<'g, T>,
    pub bk: Var<'g, T>,
    pub wv: Var<'g, T>,
    pub bv: Var<'g, T>,
    pub wo: Var<'g, T>,
    pub bo: Var<'g, T>,
    pub ln2_gamma: Var<'g, T>,
    pub ln2_beta: Var<'g, T>,
    pub w1: Var<'g, T>,
    pub b1: Var<'g, T>,
    pub w2: Var<'g, T>,
    pub b2: Var<'g, T>,
    /// `[(2M−1)², heads]`, window blocks only.
    pub rel_bias: Option<Var<'g, T>>,
}

/// Parameter names of a block, in a fixed order.
pub const BLOCK_PARAM_NAMES: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "q.weight",
    "q.bias",
    "k.weight",
    "k.bias",
    "v.weight",
    "v.bias",
    "proj.weight",
    "proj.bias",
    "ln2.gamma",
    "ln2.beta",
    "ffn1.weight",
    "ffn1.bias",
    "ffn2.weight",
    "ffn2.bias",
];

pub const REL_BIAS_NAME: &str = "rel_bias";

/// Names and shapes of a block's parameters; `window` adds the relative
/// position bias table.
pub fn block_param_shapes(c: usize, heads: usize, window: Option<usize>) -> Vec<(&'static str, Vec<usize>)> {
    let hidden = FFN_EXPANSION * c;
    let shapes = [
        vec![c],
        vec![c],
        vec![c, c],
        vec![c],
        vec![c, c],
        vec![c],
        vec![c, c],
        vec![c],
        vec![c, c],
        vec![c],
        vec![c],
        vec![c],
        vec![c, hidden],
        vec![hidden],
        vec![hidden, c],
        vec![c],
    ];
    let mut out: Vec<_> = BLOCK_PARAM_NAMES.iter().copied().zip(shapes).collect();
    if let Some(m) = window {
        out.push((REL_BIAS_NAME, vec![(2 * m - 1) * (2 * m - 1), heads]));
    }
    out
}

/// Xavier-uniform matrices, unit layer-norm gains, zero biases and a zero
/// relative-position table.
pub fn init_param<T: Real, R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor<T> {
    if shape.len() == 2 && name.ends_with("weight") {
        let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        let data = (0..shape[0] * shape[1])
            .map(|_| T::from_f64(rng.gen_range(-a..a)))
            .collect();
        Tensor::new(shape, data).expect("shape and data agree")
    } else if name.ends_with("gamma") {
        Tensor::full(shape, T::ONE)
    } else {
        Tensor::zeros(shape)
    }
}

impl<'g, T: Real> BlockParams<'g, T> {
    /// Builds the block from a name lookup. `windowed` requests the
    /// relative position table.
    pub fn bind(
        heads: usize,
        windowed: bool,
        mut lookup: impl FnMut(&str) -> Result<Var<'g, T>>,
    ) -> Result<Self> {
        let mut v = Vec::with_capacity(BLOCK_PARAM_NAMES.len());
        for name in BLOCK_PARAM_NAMES {
            v.push(lookup(name)?);
        }
        let rel_bias = if windowed { Some(lookup(REL_BIAS_NAME)?) } else { None };
        let p = BlockParams {
            heads,
            ln1_gamma: v[0],
            ln1_beta: v[1],
            wq: v[2],
            bq: v[3],
            wk: v[4],
            bk: v[5],
            wv: v[6],
            bv: v[7],
            wo: v[8],
            bo: v[9],
            ln2_gamma: v[10],
            ln2_beta: v[11],
            w1: v[12],
            b1: v[13],
            w2: v[14],
            b2: v[15],
            rel_bias,
        };
        p.check()?;
        Ok(p)
    }

    /// Freshly initialised leaves on `g`.
    pub fn random<R: Rng + ?Sized>(
        g: &'g Graph<T>,
        c: usize,
        heads: usize,
        window: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let shapes = block_param_shapes(c, heads, window);
        let mut leaves = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            leaves.push((*name, g.leaf(init_param(name, shape, rng))));
        }
        Self::bind(heads, window.is_some(), |name| {
            leaves
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| SptError::Usage(format!("missing parameter {name}")))
        })
    }

    pub fn channels(&self) -> usize {
        self.ln1_gamma.shape()[0]
    }

    /// Every parameter handle, in [`BLOCK_PARAM_NAMES`] order followed by
    /// the bias table when present.
    pub fn vars(&self) -> Vec<Var<'g, T>> {
        let mut v = vec![
            self.ln1_gamma,
            self.ln1_beta,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gamma,
            self.ln2_beta,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ];
        v.extend(self.rel_bias);
        v
    }

    fn check(&self) -> Result<()> {
        let c = self.channels();
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(SptError::dim(
                "BlockParams",
                format!("{} heads do not divide {c} channels", self.heads),
            ));
        }
        let window = self.rel_bias.map(|t| {
            let rows = t.shape()[0];
            ((rows as f64).sqrt() as usize).div_ceil(2)
        });
        let expected = block_param_shapes(c, self.heads, window);
        for ((name, shape), v) in expected.iter().zip(self.vars()) {
            if v.shape() != *shape {
                return Err(SptError::dim(
                    "BlockParams",
                    format!("{name} is {:?}, expected {shape:?}", v.shape()),
                ));
            }
        }
        Ok(())
    }
}

fn linear<'g, T: Real>(x: Var<'g, T>, w: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    x.matmul(w)?.add(b)
}

/// `LN₂` then the two-layer GELU feed-forward network.
pub fn feed_forward<'g, T: Real>(x: Var<'g, T>, p: &BlockParams<'g, T>) -> Result<Var<'g, T>> {
    let _cat = macs::category(MacCategory::Ffn);
    let z = x.layer_norm(p.ln2_gamma, p.ln2_beta)?;
    let hidden = linear(z, p.w1, p.b1)?.gelu()?;
    linear(hidden, p.w2, p.b2)
}

/// Scaled dot-product attention over `[G, n, c]` projections split into
/// `heads`. `bias` (`[heads, n, n]`) and `mask` broadcast over the scores
/// viewed as `[G/period, period, heads, n, n]`.
pub fn attention_core<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
    bias: Option<Var<'g, T>>,
    mask: Option<&ExclusionMask>,
    period: usize,
) -> Result<Var<'g, T>> {
    let [groups, n, c] = q.shape()[..] else {
        return Err(SptError::dim("attention_core", format!("q is {:?}", q.shape())));
    };
    if c % heads != 0 || period == 0 || groups % period != 0 {
        return Err(SptError::dim(
            "attention_core",
            format!("{groups} groups, period {period}, {heads} heads, {c} channels"),
        ));
    }
    let d = c / heads;
    let split = |x: Var<'g, T>| x.reshape(&[groups, n, heads, d])?.permute(&[0, 2, 1, 3]);
    let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);
    let mut s = qh.matmul_nt(kh)?.scale(1.0 / (d as f64).sqrt())?;
    if period > 1 {
        s = s.reshape(&[groups / period, period, heads, n, n])?;
    }
    if let Some(b) = bias {
        s = s.add(b)?;
    }
    let a = s.masked_softmax(mask)?.reshape(&[groups, heads, n, n])?;
    a.matmul(vh)?.permute(&[0, 2, 1, 3])?.reshape(&[groups, n, c])
}

/// Full multi-head self-attention on already-normalised tokens `[G, n, c]`,
/// including the output projection.
pub fn multi_head_attention<'g, T: Real>(
    z: Var<'g, T>,
    p: &BlockParams<'g, T>,
    bias: Option<Var<'g, T>>,
    mask: Option<&ExclusionMask>,
    period: usize,
) -> Result<Var<'g, T>> {
    let _cat = macs::category(MacCategory::Attention);
    let q = linear(z, p.wq, p.bq)?;
    let k = linear(z, p.wk, p.bk)?;
    let v = linear(z, p.wv, p.bv)?;
    let o = attention_core(q, k, v, p.heads, bias, mask, period)?;
    linear(o, p.wo, p.bo)
}

// ---------------------------------------------------------------------------
// cyclic shift and window partition

/// Flat source index of every token of a grid rolled by `(sy, sx)`:
/// `out[y, x] = in[(y + sy) mod h, (x + sx) mod w]`.
fn roll_index(batch: usize, h: usize, w: usize, sy: usize, sx: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                idx.push((b * h + (y + sy) % h) * w + (x + sx) % w);
            }
        }
    }
    idx
}

/// Cyclically shifts a grid up-left by `(sy, sx)` tokens.
pub fn roll_grid<'g, T: Real>(g: &TokenGrid<'g, T>, sy: usize, sx: usize) -> Result<TokenGrid<'g, T>> {
    if sy.is_multiple_of(g.height.max(1)) && sx.is_multiple_of(g.width.max(1)) {
        return Ok(*g);
    }
    let idx = roll_index(g.batch, g.height, g.width, sy, sx);
    let values = g
        .values
        .gather_rows(g.channels, Arc::new(idx.into_iter().map(Some).collect()))?
        .reshape(&g.values.shape())?;
    g.with_values(values)
}

/// Inverse of [`roll_grid`] with the same offsets.
pub fn unroll_grid<'g, T: Real>(g: &TokenGrid<'g, T>, sy: usize, sx: usize) -> Result<TokenGrid<'g, T>> {
    roll_grid(g, (g.height - sy % g.height) % g.height, (g.width - sx % g.width) % g.width)
}

pub fn roll_scores<'g, T: Real>(s: &ScoreMap<'g, T>, sy: usize, sx: usize) -> Result<ScoreMap<'g, T>> {
    let grid = roll_grid(&TokenGrid::new(s.logits)?, sy, sx)?;
    ScoreMap::new(grid.values)
}

pub fn unroll_scores<'g, T: Real>(s: &ScoreMap<'g, T>, sy: usize, sx: usize) -> Result<ScoreMap<'g, T>> {
    let grid = unroll_grid(&TokenGrid::new(s.logits)?, sy, sx)?;
    ScoreMap::new(grid.values)
}

pub fn unroll_keep(k: &KeepMask, sy: usize, sx: usize) -> KeepMask {
    let (h, w) = (k.height, k.width);
    let idx = roll_index(k.batch, h, w, (h - sy % h) % h, (w - sx % w) % w);
    KeepMask {
        keep: idx.iter().map(|&i| k.keep[i]).collect(),
        ..k.clone()
    }
}

/// Source token of every window slot, windows in `(b, wy, wx)` order and
/// tokens row-major inside each window, after rolling by `shift`.
fn window_index(batch: usize, h: usize, w: usize, m: usize, shift: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for wy in 0..h / m {
            for wx in 0..w / m {
                for iy in 0..m {
                    for ix in 0..m {
                        let y = (wy * m + iy + shift) % h;
                        let x = (wx * m + ix + shift) % w;
                        idx.push((b * h + y) * w + x);
                    }
                }
            }
        }
    }
    idx
}

/// Row of the relative position table for every ordered token pair of an
/// `m×m` window.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / m) as isize - (j / m) as isize + m as isize - 1;
            let dx = (i % m) as isize - (j % m) as isize + m as isize - 1;
            idx.push(dy as usize * (2 * m - 1) + dx as usize);
        }
    }
    idx
}

/// `[nW, 1, n, n]` validity of token pairs inside each window of a grid
/// rolled by `shift`: pairs are valid only when both tokens come from the
/// same contiguous region of the unrolled map.
pub fn shifted_window_mask(h: usize, w: usize, m: usize, shift: usize) -> ExclusionMask {
    let region = |v: usize, size: usize| {
        if v < size - m {
            0
        } else if v < size - shift {
            1
        } else {
            2
        }
    };
    let n = m * m;
    let windows = (h / m) * (w / m);
    let mut valid = Vec::with_capacity(windows * n * n);
    for wy in 0..h / m {
        for wx in 0..w / m {
            let label = |t: usize| region(wy * m + t / m, h) * 3 + region(wx * m + t % m, w);
            for i in 0..n {
                for j in 0..n {
                    valid.push(label(i) == label(j));
                }
            }
        }
    }
    ExclusionMask {
        shape: vec![windows, 1, n, n],
        valid,
    }
}

/// Shift actually applied by a window block: none when a single window
/// already covers the grid.
pub fn window_shift(h: usize, w: usize, m: usize, shifted: bool) -> usize {
    if shifted && h.min(w) > m {
        m / 2
    } else {
        0
    }
}

pub fn window_attention_block<'g, T: Real>(
    g: &TokenGrid<'g, T>,
    p: &BlockParams<'g, T>,
    shifted: bool,
    m: usize,
) -> Result<TokenGrid<'g, T>> {
    if m == 0 || !g.height.is_multiple_of(m) || !g.width.is_multiple_of(m) {
        return Err(SptError::dim(
            "window_attention_block",
            format!("{}x{} grid with window {m}", g.height, g.width),
        ));
    }
    if g.channels != p.channels() {
        return Err(SptError::dim(
            "window_attention_block",
            format!("{} channels, block width {}", g.channels, p.channels()),
        ));
    }
    let shift = window_shift(g.height, g.width, m, shifted);
    let (n, c) = (m * m, g.channels);
    let windows = (g.height / m) * (g.width / m);
    let groups = g.batch * windows;

    let fwd = window_index(g.batch, g.height, g.width, m, shift);
    let mut back = vec![0; fwd.len()];
    for (slot, &src) in fwd.iter().enumerate() {
        back[src] = slot;
    }

    let z = g.values.layer_norm(p.ln1_gamma, p.ln1_beta)?;
    let zw = z
        .gather_rows(c, Arc::new(fwd.into_iter().map(Some).collect()))?
        .reshape(&[groups, n, c])?;
    let bias = match p.rel_bias {
        Some(table) => {
            let heads = p.heads;
            let idx = relative_position_index(m).into_iter().map(Some).collect();
            Some(
                table
                    .gather_rows(heads, Arc::new(idx))?
                    .reshape(&[n, n, heads])?
                    .permute(&[2, 0, 1])?,
            )
        }
        None => None,
    };
    let mask = (shift > 0).then(|| shifted_window_mask(g.height, g.width, m, shift));
    let attn = multi_head_attention(zw, p, bias, mask.as_ref(), windows)?;
    let attn = attn
        .gather_rows(c, Arc::new(back.into_iter().map(Some).collect()))?
        .reshape(&g.values.shape())?;
    let h = g.values.add(attn)?;
    g.with_values(h.add(feed_forward(h, p)?)?)
}

// ---------------------------------------------------------------------------
// select-and-pack attention

/// Result of masked attention over packed containers.
#[derive(Debug, Clone)]
pub struct PackedAttention<'g, T: Real> {
    /// `base` with attention outputs added at the selected positions.
    pub grid: TokenGrid<'g, T>,
    pub plan: PackingPlan,
}

/// Packs the selected tokens of `r_p`, attends within containers under the
/// same-image mask, and returns `base + scatter(attn)`.
///
/// The value projection runs over the whole grid before packing; query, key
/// and output projections run per container. With an empty selection the
/// attention path is skipped entirely.
pub fn packed_attention<'g, T: Real>(
    r_p: &TokenGrid<'g, T>,
    base: &TokenGrid<'g, T>,
    keep: &KeepMask,
    p: &BlockParams<'g, T>,
    len: usize,
) -> Result<PackedAttention<'g, T>> {
    let plan = packing::build_packing_plan(keep, len)?;
    if plan.num_selected == 0 {
        return Ok(PackedAttention { grid: *base, plan });
    }
    let _cat = macs::category(MacCategory::Attention);
    let z = r_p.with_values(r_p.values.layer_norm(p.ln1_gamma, p.ln1_beta)?)?;
    let v = r_p.with_values(linear(z.values, p.wv, p.bv)?)?;
    let zp = packing::pack_tokens(&z, &plan)?;
    let vp = packing::pack_tokens(&v, &plan)?;
    let rp = packing::pack_tokens(r_p, &plan)?;
    let mask = packing::build_same_image_mask(&zp.slot_image, len)?.to_exclusion();
    let q = linear(zp.values, p.wq, p.bq)?;
    let k = linear(zp.values, p.wk, p.bk)?;
    let o = attention_core(q, k, vp.values, p.heads, None, Some(&mask), 1)?;
    let attn = linear(o, p.wo, p.bo)?;
    let merged = PackedBatch {
        values: rp.values.add(attn)?,
        slot_image: rp.slot_image,
    };
    let grid = packing::unpack_scatter(&merged, &plan, base)?;
    Ok(PackedAttention { grid, plan })
}

#[derive(Debug, Clone)]
pub struct SpaBlockOutput<'g, T: Real> {
    pub grid: TokenGrid<'g, T>,
    /// Fused score map, in the unshifted frame.
    pub scores: ScoreMap<'g, T>,
    pub keep: KeepMask,
    /// Containers used, `B′`.
    pub containers: usize,
}

/// Chooses the positive tokens of `scores` according to `cfg.selection`.
pub fn select_tokens<'g, T: Real, R: Rng + ?Sized>(
    scores: &ScoreMap<'g, T>,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<crate::types::SelectionMask<'g, T>> {
    match cfg.selection {
        SelectionPolicy::Gumbel => selection::gumbel_select(scores, cfg.tau, cfg.temp, mode, rng),
        SelectionPolicy::TopFraction(f) => selection::top_fraction_select(scores, f),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn spa_block<'g, T: Real, R: Rng + ?Sized>(
    g: &TokenGrid<'g, T>,
    s_up: Option<&ScoreMap<'g, T>>,
    p: &BlockParams<'g, T>,
    gate: &GateParams<'g, T>,
    cfg: &ModelConfig,
    shifted: bool,
    mode: Mode,
    rng: &mut R,
) -> Result<SpaBlockOutput<'g, T>> {
    if !g.height.is_multiple_of(2) || !g.width.is_multiple_of(2) {
        return Err(SptError::dim(
            "spa_block",
            format!("{}x{} grid is not even", g.height, g.width),
        ));
    }
    let shift = if shifted { cfg.window / 2 } else { 0 };
    let gs = roll_grid(g, shift, shift)?;
    let up = s_up.map(|s| roll_scores(s, 2 * shift, 2 * shift)).transpose()?;

    let z = gs.with_values(gs.values.layer_norm(p.ln1_gamma, p.ln1_beta)?)?;
    let own = {
        let _cat = macs::category(MacCategory::Attention);
        selection::gate_scores(&z, gate)?
    };
    let scores = selection::fuse_upscale(&own, up.as_ref())?;
    let r_g = selection::gate_representation(&gs, &scores)?;
    let sel = select_tokens(&scores, cfg, mode, rng)?;
    let r_p = r_g.with_values(sel.multiplier.mul(r_g.values)?)?;

    let attended = packed_attention(&r_p, &r_g, &sel.keep, p, cfg.package_len)?;
    let h = attended.grid.values;
    let out = gs.with_values(h.add(feed_forward(h, p)?)?)?;

    Ok(SpaBlockOutput {
        grid: unroll_grid(&out, shift, shift)?,
        scores: unroll_scores(&scores, shift, shift)?,
        keep: unroll_keep(&sel.keep, shift, shift),
        containers: attended.plan.num_containers,
    })
}

#[derive(Debug, Clone)]
pub struct SpaStageOutput<'g, T: Real> {
    pub grid: TokenGrid<'g, T>,
    /// The last block's fused score map.
    pub scores: ScoreMap<'g, T>,
    pub block_scores: Vec<ScoreMap<'g, T>>,
    pub block_keeps: Vec<KeepMask>,
    pub containers: Vec<usize>,
}

/// Runs SPA blocks in sequence; odd blocks are shifted and every block fuses
/// its gate with the stage input map `s_in`.
pub fn spa_stage<'g, T: Real, R: Rng + ?Sized>(
    g: &TokenGrid<'g, T>,
    s_in: Option<&ScoreMap<'g, T>>,
    blocks: &[(BlockParams<'g, T>, GateParams<'g, T>)],
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<SpaStageOutput<'g, T>> {
    if blocks.is_empty() || !blocks.len().is_multiple_of(2) {
        return Err(SptError::Usage(format!(
            "an SPA stage needs an even, nonzero number of blocks, got {}",
            blocks.len()
        )));
    }
    let mut grid = *g;
    let mut out = SpaStageOutput {
        grid,
        scores: ScoreMap::new(g.values.graph().constant(Tensor::zeros(&[0, 0, 0, 1])))?,
        block_scores: Vec::with_capacity(blocks.len()),
        block_keeps: Vec::with_capacity(blocks.len()),
        containers: Vec::with_capacity(blocks.len()),
    };
    for (i, (p, gate)) in blocks.iter().enumerate() {
        let b = spa_block(&grid, s_in, p, gate, cfg, i % 2 == 1, mode, rng)?;
        grid = b.grid;
        out.block_scores.push(b.scores);
        out.block_keeps.push(b.keep);
        out.containers.push(b.containers);
    }
    out.grid = grid;
    out.scores = *out.block_scores.last().expect("at least one block");
    Ok(out)
}

/// Window blocks in sequence, odd blocks shifted.
pub fn window_stage<'g, T: Real>(
    g: &TokenGrid<'g, T>,
    blocks: &[BlockParams<'g, T>],
    m: usize,
) -> Result<TokenGrid<'g, T>> {
    let mut grid = *g;
    for (i, p) in blocks.iter().enumerate() {
        grid = window_attention_block(&grid, p, i % 2 == 1, m)?;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid<'g>(g: &'g Graph<f64>, shape: &[usize], seed: u64) -> TokenGrid<'g, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TokenGrid::new(g.leaf(Tensor::new(shape, data).unwrap())).unwrap()
    }

    fn zeroed_block<'g>(g: &'g Graph<f64>, c: usize, heads: usize, window: Option<usize>) -> BlockParams<'g, f64> {
        let shapes = block_param_shapes(c, heads, window);
        BlockParams::bind(heads, window.is_some(), |name| {
            let shape = &shapes.iter().find(|(n, _)| *n == name).unwrap().1;
            let t = if name.ends_with("gamma") {
                Tensor::full(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            };
            Ok(g.leaf(t))
        })
        .unwrap()
    }

    fn dense_oracle(x: &[f64], b: usize, n: usize, _c: usize, p: &BlockParams<'_, f64>) -> Vec<f64> {
        crate::verify::dense_block_reference(x, b, n, &crate::verify::BlockWeights::from_params(p))
    }

    #[test]
    fn zero_weights_give_identity() {
        let g = Graph::new();
        let x = random_grid(&g, &[2, 4, 4, 8], 1);
        let p = zeroed_block(&g, 8, 2, Some(2));
        for shifted in [false, true] {
            let y = window_attention_block(&x, &p, shifted, 2).unwrap();
            assert_eq!(y.values.value().data(), x.values.value().data());
        }
    }

    #[test]
    fn single_window_matches_dense_oracle() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_grid(&g, &[2, 3, 3, 8], 2);
        let p = BlockParams::random(&g, 8, 2, Some(3), &mut rng).unwrap();
        let y = window_attention_block(&x, &p, false, 3).unwrap();
        let want = dense_oracle(x.values.value().data(), 2, 9, 8, &p);
        for (a, b) in y.values.value().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn shifted_blocks_preserve_constant_input() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = TokenGrid::new(g.leaf(Tensor::full(&[1, 4, 4, 4], 0.7))).unwrap();
        let p = BlockParams::random(&g, 4, 2, Some(2), &mut rng).unwrap();
        let y = window_attention_block(&x, &p, true, 2).unwrap();
        let v = y.values.value();
        let first = &v.data()[..4];
        for tok in v.data().chunks(4) {
            for (a, b) in tok.iter().zip(first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roll_round_trip() {
        let g = Graph::new();
        let x = random_grid(&g, &[2, 4, 6, 3], 3);
        let r = roll_grid(&x, 1, 2).unwrap();
        assert_ne!(r.values.value().data(), x.values.value().data());
        let back = unroll_grid(&r, 1, 2).unwrap();
        assert_eq!(back.values.value().data(), x.values.value().data());
        let k = KeepMask::new(1, 2, 2, vec![true, false, false, false]).unwrap();
        let rolled = KeepMask {
            keep: roll_index(1, 2, 2, 1, 1).iter().map(|&i| k.keep[i]).collect(),
            ..k.clone()
        };
        assert_eq!(rolled.keep, vec![false, false, false, true]);
        assert_eq!(unroll_keep(&rolled, 1, 1), k);
    }

    #[test]
    fn shift_mask_regions() {
        let m = shifted_window_mask(4, 4, 2, 1);
        assert_eq!(m.shape, vec![4, 1, 4, 4]);
        // The first window lies in a single region.
        assert!(m.valid[..16].iter().all(|&v| v));
        // The last window straddles both seams: four singleton regions.
        let last = &m.valid[48..];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(last[i * 4 + j], i == j);
            }
        }
    }

    #[test]
    fn relative_index_is_symmetric_about_centre() {
        let idx = relative_position_index(2);
        assert_eq!(idx[0], 4);
        assert_eq!(idx[3], 0);
        assert_eq!(idx[3 * 4], 8);
    }

    fn micro_cfg(n_side: usize) -> ModelConfig {
        ModelConfig {
            window: n_side,
            package_len: n_side * n_side,
            ..ModelConfig::micro()
        }
    }

    #[test]
    fn spa_full_selection_matches_dense_oracle() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_grid(&g, &[1, 4, 4, 8], 4);
        let p = BlockParams::random(&g, 8, 2, None, &mut rng).unwrap();
        let gate = GateParams {
            weight: g.leaf(Tensor::zeros(&[8, 1])),
            bias: g.leaf(Tensor::full(&[1], 3.0)),
        };
        let cfg = micro_cfg(4);
        let out = spa_block(&x, None, &p, &gate, &cfg, false, Mode::Eval, &mut rng).unwrap();
        assert_eq!(out.keep.count(), 16);
        let sig = 1.0 / (1.0 + (-3.0f64).exp());
        let r_g: Vec<f64> = x.values.value().data().iter().map(|v| v * sig).collect();
        let want = dense_oracle(&r_g, 1, 16, 8, &p);
        for (a, b) in out.grid.values.value().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn spa_without_selection_skips_attention() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_grid(&g, &[2, 4, 4, 8], 5);
        let p = BlockParams::random(&g, 8, 2, None, &mut rng).unwrap();
        let gate = GateParams {
            weight: g.leaf(Tensor::zeros(&[8, 1])),
            bias: g.leaf(Tensor::full(&[1], -1e4)),
        };
        let cfg = micro_cfg(2);
        let (out, counts) = macs::measure(|| spa_block(&x, None, &p, &gate, &cfg, true, Mode::Train, &mut rng).unwrap());
        assert_eq!(out.keep.count(), 0);
        assert_eq!(out.containers, 0);
        // Only the gate itself was counted against attention.
        assert_eq!(counts.attention, 2 * 16 * 8);
        let r_g = x.values.scale(0.0).unwrap();
        let want = r_g.add(feed_forward(r_g, &p).unwrap()).unwrap();
        assert_eq!(out.grid.values.value().data(), want.value().data());
    }

    #[test]
    fn spa_is_seed_deterministic() {
        let run = || {
            let g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let x = random_grid(&g, &[2, 4, 4, 8], 6);
            let p = BlockParams::random(&g, 8, 2, None, &mut rng).unwrap();
            let gate = GateParams {
                weight: g.leaf(init_param("gate.weight", &[8, 1], &mut rng)),
                bias: g.leaf(Tensor::full(&[1], -1.0)),
            };
            let out = spa_block(&x, None, &p, &gate, &micro_cfg(2), true, Mode::Train, &mut rng).unwrap();
            (out.grid.values.tensor().into_data(), out.keep)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stage_returns_last_block_scores() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_grid(&g, &[1, 4, 4, 8], 7);
        let s_in = ScoreMap::new(g.leaf(Tensor::zeros(&[1, 8, 8, 1]))).unwrap();
        let blocks: Vec<_> = (0..4)
            .map(|_| {
                (
                    zeroed_block(&g, 8, 2, None),
                    GateParams {
                        weight: g.leaf(Tensor::zeros(&[8, 1])),
                        bias: g.leaf(Tensor::full(&[1], -0.5)),
                    },
                )
            })
            .collect();
        let out = spa_stage(&x, Some(&s_in), &blocks, &micro_cfg(2), Mode::Eval, &mut rng).unwrap();
        assert_eq!(out.block_scores.len(), 4);
        assert_eq!(out.scores.logits.id(), out.block_scores[3].logits.id());
        // Pooled zeros beat the -0.5 bias everywhere.
        assert!(out.scores.logits.value().data().iter().all(|&v| v == 0.0));
        assert!(spa_stage(&x, Some(&s_in), &blocks[..3], &micro_cfg(2), Mode::Eval, &mut rng).is_err());
    }
}
