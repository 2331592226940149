//! Pure forward kernels over [`Tensor`]s.
//!
//! These are stateless and thread-safe. The autodiff graph calls into them
//! for forward values and reuses the lower-level helpers for gradients.

use rayon::prelude::*;

use super::macs;
use super::tensor::{numel, Real, Tensor};
use crate::error::{Result, SptError};

/// Work size (in MACs) above which matmul spreads over the rayon pool.
const PAR_THRESHOLD: usize = 1 << 15;

// ---------------------------------------------------------------------------
// broadcasting

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(SptError::dim(
                    op,
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `src` viewed through `out`'s shape; broadcast axes get stride 0.
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` over every element of `out`.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// matmul

fn transposed<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`, all contiguous row-major.
fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let rows = |out: &mut [T], row0: usize| {
        for (ri, orow) in out.chunks_mut(n).enumerate() {
            let arow = &a[(row0 + ri) * k..(row0 + ri + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m >= 8 {
        let chunk = m.div_ceil(rayon::current_num_threads().max(1)).max(1);
        out.par_chunks_mut(chunk * n)
            .enumerate()
            .for_each(|(ci, block)| rows(block, ci * chunk));
    } else {
        rows(out, 0);
    }
}

/// One contraction `op(a)·op(b)` where `op` optionally transposes the
/// stored matrix. `a` is stored `m×k` (or `k×m` when `ta`), `b` is `k×n`
/// (or `n×k` when `tb`).
pub(crate) fn gemm<T: Real>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let at;
    let a = if ta {
        at = transposed(a, k, m);
        &at[..]
    } else {
        a
    };
    let bt;
    let b = if tb {
        bt = transposed(b, n, k);
        &bt[..]
    } else {
        b
    };
    let mut out = vec![T::ZERO; m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

/// Batch layout of a (possibly broadcast) batched matmul.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub batch_shape: Vec<usize>,
    /// Source batch index of `a` / `b` for every output batch element.
    pub a_batch: Vec<usize>,
    pub b_batch: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl MatmulPlan {
    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch_shape.clone();
        s.extend([self.m, self.n]);
        s
    }

    pub fn batches(&self) -> usize {
        self.a_batch.len()
    }
}

/// Plans `a · op(b)` with `op = transpose` when `tb`.
pub(crate) fn plan_matmul(a: &[usize], b: &[usize], tb: bool) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(SptError::dim(
            "matmul",
            format!("operands need rank >= 2, got {a:?} and {b:?}"),
        ));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if tb {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(SptError::dim(
            "matmul",
            format!("inner dimensions disagree: {a:?} x {b:?}{}", if tb { "^T" } else { "" }),
        ));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch_shape = broadcast_shape("matmul", ab, bb)?;
    let sa = broadcast_strides(ab, &batch_shape);
    let sb = broadcast_strides(bb, &batch_shape);
    let nb = numel(&batch_shape);
    let mut a_batch = Vec::with_capacity(nb);
    let mut b_batch = Vec::with_capacity(nb);
    if batch_shape.is_empty() {
        a_batch.push(0);
        b_batch.push(0);
    } else {
        for_each_broadcast(&batch_shape, &sa, &sb, |_, ia, ib| {
            a_batch.push(ia);
            b_batch.push(ib);
        });
    }
    Ok(MatmulPlan {
        batch_shape,
        a_batch,
        b_batch,
        m,
        k,
        n,
    })
}

/// Evaluates every output batch of a planned product. `lhs`/`rhs` select
/// the stored matrices for output batch `i`; dimensions are of the
/// product actually computed.
pub(crate) fn batched_gemm<T: Real>(
    batches: usize,
    lhs: impl Fn(usize) -> (usize, usize) + Sync,
    rhs: impl Fn(usize) -> (usize, usize) + Sync,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    (m, k, n): (usize, usize, usize),
) -> Vec<T> {
    let one = |i: usize| {
        let (a0, a1) = lhs(i);
        let (b0, b1) = rhs(i);
        gemm(&a[a0..a1], ta, &b[b0..b1], tb, m, k, n)
    };
    if batches > 1 && batches * m * n * k >= PAR_THRESHOLD {
        let parts: Vec<Vec<T>> = (0..batches).into_par_iter().map(one).collect();
        parts.concat()
    } else {
        let mut out = Vec::with_capacity(batches * m * n);
        for i in 0..batches {
            out.extend(one(i));
        }
        out
    }
}

/// Forward `a · op(b)` data, without touching the MAC counter.
pub(crate) fn matmul_data<T: Real>(
    plan: &MatmulPlan,
    a: &[T],
    b: &[T],
    b_rank: usize,
    tb: bool,
) -> Vec<T> {
    let MatmulPlan { m, k, n, .. } = *plan;
    if b_rank == 2 && !tb {
        // Weight matrix shared by every batch: one tall contraction.
        return gemm(a, false, b, false, plan.batches() * m, k, n);
    }
    batched_gemm(
        plan.batches(),
        |i| (plan.a_batch[i] * m * k, (plan.a_batch[i] + 1) * m * k),
        |i| (plan.b_batch[i] * k * n, (plan.b_batch[i] + 1) * k * n),
        a,
        false,
        b,
        tb,
        (m, k, n),
    )
}

/// Batched matrix product with broadcasting over leading dimensions.
/// Registers `m·n·k` MACs per output batch element.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, b, false)
}

/// `a · bᵀ` over the last two axes of `b`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, b, true)
}

pub(crate) fn matmul_ex<T: Real>(a: &Tensor<T>, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let plan = plan_matmul(a.shape(), b.shape(), tb)?;
    macs::record((plan.batches() * plan.m * plan.n * plan.k) as u64);
    let data = matmul_data(&plan, a.data(), b.data(), b.rank(), tb);
    Tensor::new(&plan.out_shape(), data)?.ensure_finite("matmul")
}

// ---------------------------------------------------------------------------
// pointwise

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Gelu,
    Relu,
    Softplus,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// Elementwise maximum; ties resolve to the left operand.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t)
        + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

pub(crate) fn unary_value<T: Real>(op: UnaryOp, x: T) -> T {
    match op {
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Gelu => gelu(x),
        UnaryOp::Relu => x.max(T::ZERO),
        UnaryOp::Softplus => softplus(x),
        UnaryOp::Neg => -x,
    }
}

pub fn unary<T: Real>(op: UnaryOp, x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(|v| unary_value(op, v)).ensure_finite("pointwise")
}

pub(crate) fn binary_value<T: Real>(op: BinaryOp, a: T, b: T) -> T {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Max => {
            if b > a {
                b
            } else {
                a
            }
        }
    }
}

pub fn binary<T: Real>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let data = ad
            .iter()
            .zip(bd)
            .map(|(&x, &y)| binary_value(op, x, y))
            .collect();
        return Tensor::new(a.shape(), data)?.ensure_finite("pointwise");
    }
    let out = broadcast_shape("pointwise", a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::ZERO; numel(&out)];
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
        data[o] = binary_value(op, ad[ia], bd[ib]);
    });
    Tensor::new(&out, data)?.ensure_finite("pointwise")
}

/// Elementwise kernels; binary kinds broadcast numpy-style.
pub fn pointwise<T: Real>(kind: Pointwise, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match (kind, args) {
        (Pointwise::Unary(op), [x]) => unary(op, x),
        (Pointwise::Binary(op), [a, b]) => binary(op, a, b),
        _ => Err(SptError::Usage(format!(
            "{kind:?} called with {} operands",
            args.len()
        ))),
    }
}

// ---------------------------------------------------------------------------
// masked softmax

/// Boolean validity mask; `false` entries are excluded from a softmax
/// before exponentiation. Broadcasts against the scores like a tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusionMask {
    pub shape: Vec<usize>,
    pub valid: Vec<bool>,
}

impl ExclusionMask {
    pub fn new(shape: &[usize], valid: Vec<bool>) -> Result<Self> {
        if numel(shape) != valid.len() {
            return Err(SptError::dim(
                "ExclusionMask::new",
                format!("shape {shape:?} vs {} entries", valid.len()),
            ));
        }
        Ok(ExclusionMask {
            shape: shape.to_vec(),
            valid,
        })
    }
}

/// For each row (all but the last axis) of `x`, the offset of the matching
/// mask row.
pub(crate) fn mask_row_offsets(x: &[usize], mask: &ExclusionMask) -> Result<Vec<usize>> {
    let l = *x.last().ok_or_else(|| SptError::dim("masked_softmax", "scalar input"))?;
    if mask.shape.last() != Some(&l) {
        return Err(SptError::dim(
            "masked_softmax",
            format!("mask {:?} does not end in {l}", mask.shape),
        ));
    }
    let lead = &x[..x.len() - 1];
    let mlead = &mask.shape[..mask.shape.len() - 1];
    if mlead.len() > lead.len() || broadcast_shape("masked_softmax", lead, mlead)? != lead {
        return Err(SptError::dim(
            "masked_softmax",
            format!("mask {:?} does not broadcast to {x:?}", mask.shape),
        ));
    }
    let sm = broadcast_strides(mlead, lead);
    let zeros = vec![0; lead.len()];
    let mut offs = Vec::with_capacity(numel(lead));
    if lead.is_empty() {
        offs.push(0);
    } else {
        for_each_broadcast(lead, &sm, &zeros, |_, im, _| offs.push(im * l));
    }
    Ok(offs)
}

pub(crate) fn masked_softmax_data<T: Real>(
    x: &[T],
    l: usize,
    mask: Option<(&[bool], &[usize])>,
) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (r, (xr, yr)) in x.chunks(l).zip(out.chunks_mut(l)).enumerate() {
        let valid = |j: usize| match mask {
            Some((v, offs)) => v[offs[r] + j],
            None => true,
        };
        let mut mx: Option<T> = None;
        for (j, &v) in xr.iter().enumerate() {
            if valid(j) {
                mx = Some(mx.map_or(v, |m: T| m.max(v)));
            }
        }
        let Some(mx) = mx else { continue };
        let mut sum = T::ZERO;
        for (j, (&v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
            if valid(j) {
                *y = (v - mx).exp();
                sum += *y;
            }
        }
        for y in yr.iter_mut() {
            *y = *y / sum;
        }
    }
    out
}

/// Softmax over the last axis restricted to valid entries. Excluded
/// positions are exactly zero; rows without any valid entry are all zero.
pub fn masked_softmax_lastdim<T: Real>(
    x: &Tensor<T>,
    mask: Option<&ExclusionMask>,
) -> Result<Tensor<T>> {
    let l = *x
        .shape()
        .last()
        .ok_or_else(|| SptError::dim("masked_softmax", "scalar input"))?;
    let data = match mask {
        Some(m) => {
            let offs = mask_row_offsets(x.shape(), m)?;
            masked_softmax_data(x.data(), l, Some((&m.valid, &offs)))
        }
        None => masked_softmax_data(x.data(), l, None),
    };
    Tensor::new(x.shape(), data)?.ensure_finite("masked_softmax")
}

// ---------------------------------------------------------------------------
// layer norm

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_data<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> LayerNormOut<T> {
    let c = gamma.len();
    let rows = x.len() / c;
    let inv_c = T::ONE / T::from_f64(c as f64);
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; rows];
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mean = xr.iter().copied().sum::<T>() * inv_c;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let h = (xr[j] - mean) * rs;
            xhat[r * c + j] = h;
            y[r * c + j] = h * gamma[j] + beta[j];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

/// Normalizes each position over its channels (population variance), then
/// applies the affine `gamma`, `beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| SptError::dim("layer_norm", "scalar input"))?;
    if c == 0 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(SptError::dim(
            "layer_norm",
            format!(
                "x {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let out = layer_norm_data(x.data(), gamma.data(), beta.data(), T::from_f64(eps));
    Tensor::new(x.shape(), out.y)?.ensure_finite("layer_norm")
}

// ---------------------------------------------------------------------------
// pooling

pub(crate) fn pool_shape(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [b, h, w, c] if h % 2 == 0 && w % 2 == 0 => Ok([b, h / 2, w / 2, c]),
        _ => Err(SptError::dim(
            "max_pool_2x2",
            format!("expected [b, even h, even w, c], got {shape:?}"),
        )),
    }
}

/// Returns pooled values and, per output element, the flat input index of
/// the winning element (first maximum in scan order).
pub(crate) fn max_pool_data<T: Real>(x: &[T], shape: &[usize]) -> Result<(Vec<T>, Vec<usize>)> {
    let [b, ho, wo, c] = pool_shape(shape)?;
    let (h, w) = (ho * 2, wo * 2);
    let mut vals = Vec::with_capacity(b * ho * wo * c);
    let mut arg = Vec::with_capacity(b * ho * wo * c);
    for bi in 0..b {
        for y in 0..ho {
            for xo in 0..wo {
                for ch in 0..c {
                    let mut best_i = ((bi * h + 2 * y) * w + 2 * xo) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((bi * h + 2 * y + dy) * w + 2 * xo + dx) * c + ch;
                        if x[i] > x[best_i] {
                            best_i = i;
                        }
                    }
                    vals.push(x[best_i]);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((vals, arg))
}

pub fn max_pool_2x2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = pool_shape(x.shape())?;
    let (vals, _) = max_pool_data(x.data(), x.shape())?;
    Tensor::new(&out_shape, vals)
}

// ---------------------------------------------------------------------------
// layout

pub(crate) fn permute_data<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> Result<(Vec<T>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(SptError::dim(
            "permute",
            format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; rank];
    let mut out = vec![T::ZERO; x.len()];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = x[i]);
    Ok((out, out_shape))
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Copies rows of width `row` from `x`; `None` yields a zero row.
pub(crate) fn gather_rows_data<T: Real>(x: &[T], row: usize, idx: &[Option<usize>]) -> Vec<T> {
    let mut out = vec![T::ZERO; idx.len() * row];
    for (dst, src) in out.chunks_mut(row).zip(idx) {
        if let Some(s) = src {
            dst.copy_from_slice(&x[s * row..(s + 1) * row]);
        }
    }
    out
}

pub(crate) fn check_row_indices(
    op: &'static str,
    rows: usize,
    idx: impl IntoIterator<Item = usize>,
) -> Result<()> {
    for i in idx {
        if i >= rows {
            return Err(SptError::dim(op, format!("row {i} out of bounds for {rows} rows")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&i, &b).unwrap().data(), b.data());
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(SptError::Dimension { .. })));
    }

    #[test]
    fn matmul_broadcasts_batches() {
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 2, 1], &[10.0, 100.0]);
        let r = matmul(&a, &b).unwrap();
        assert_eq!(r.shape(), &[2, 1, 1]);
        assert_eq!(r.data(), &[210.0, 430.0]);
    }

    #[test]
    fn matmul_counts_macs() {
        let a = Tensor::<f32>::zeros(&[3, 4, 5]);
        let b = Tensor::<f32>::zeros(&[5, 6]);
        let (_, counts) = macs::measure(|| matmul(&a, &b).unwrap());
        assert_eq!(counts.total(), 3 * 4 * 5 * 6);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let r = matmul_nt(&a, &b).unwrap();
        assert_eq!(r.data(), &[4.0, 2.0, 10.0, 5.0]);
    }

    #[test]
    fn softmax_examples() {
        let x = t(&[2], &[1.0, 1.0]);
        let m = ExclusionMask::new(&[2], vec![true, true]).unwrap();
        assert_eq!(masked_softmax_lastdim(&x, Some(&m)).unwrap().data(), &[0.5, 0.5]);

        let x = t(&[2], &[5.0, 100.0]);
        let m = ExclusionMask::new(&[2], vec![true, false]).unwrap();
        assert_eq!(masked_softmax_lastdim(&x, Some(&m)).unwrap().data(), &[1.0, 0.0]);

        let x = t(&[3], &[0.0, std::f64::consts::LN_2, 0.0]);
        let m = ExclusionMask::new(&[3], vec![true, true, false]).unwrap();
        let y = masked_softmax_lastdim(&x, Some(&m)).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let m = ExclusionMask::new(&[2, 2], vec![false, false, true, true]).unwrap();
        let y = masked_softmax_lastdim(&x, Some(&m)).unwrap();
        assert_eq!(&y.data()[..2], &[0.0, 0.0]);
        assert!((y.data()[2] + y.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_broadcasts_over_heads() {
        let x = t(&[1, 2, 1, 2], &[0.0, 0.0, 0.0, 0.0]);
        let m = ExclusionMask::new(&[1, 1, 1, 2], vec![true, false]).unwrap();
        let y = masked_softmax_lastdim(&x, Some(&m)).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 1.0, 0.0]);
        let bad = ExclusionMask::new(&[3], vec![true; 3]).unwrap();
        assert!(masked_softmax_lastdim(&x, Some(&bad)).is_err());
    }

    #[test]
    fn pointwise_examples() {
        let zero = t(&[1], &[0.0]);
        let s = pointwise(Pointwise::Unary(UnaryOp::Sigmoid), &[&zero]).unwrap();
        assert_eq!(s.data(), &[0.5]);
        let s = unary(UnaryOp::Sigmoid, &t(&[1], &[-10.0])).unwrap();
        assert!((s.data()[0] - 4.5398e-5).abs() < 1e-8);
        let half = Tensor::scalar(0.5);
        let m = binary(BinaryOp::Mul, &t(&[3], &[1.0, 2.0, 3.0]), &half).unwrap();
        assert_eq!(m.data(), &[0.5, 1.0, 1.5]);
        assert!(binary(BinaryOp::Add, &t(&[2], &[0.0; 2]), &t(&[3], &[0.0; 3])).is_err());
        assert!(pointwise(Pointwise::Binary(BinaryOp::Add), &[&zero]).is_err());
    }

    #[test]
    fn channel_broadcast() {
        let r = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = t(&[1, 2, 1], &[2.0, -1.0]);
        let p = binary(BinaryOp::Mul, &s, &r).unwrap();
        assert_eq!(p.shape(), &[1, 2, 3]);
        assert_eq!(p.data(), &[2.0, 4.0, 6.0, -4.0, -5.0, -6.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[4], &[1.0; 4]);
        let zero = t(&[4], &[0.0; 4]);
        let y = layer_norm(&t(&[4], &[1.0; 4]), &one, &zero, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
        let y = layer_norm(
            &t(&[2], &[1.0, -1.0]),
            &t(&[2], &[1.0, 1.0]),
            &t(&[2], &[0.0, 0.0]),
            LAYER_NORM_EPS,
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-4 && (y.data()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn max_pool_examples() {
        let x = t(&[1, 2, 2, 1], &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(max_pool_2x2(&x).unwrap().data(), &[1.0]);
        let z = Tensor::<f64>::zeros(&[1, 4, 4, 1]);
        let p = max_pool_2x2(&z).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2, 1]);
        assert!(p.data().iter().all(|&v| v == 0.0));
        assert!(max_pool_2x2(&Tensor::<f64>::zeros(&[1, 3, 4, 1])).is_err());
    }

    #[test]
    fn permute_transposes() {
        let (d, s) = permute_data(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[1, 0]).unwrap();
        assert_eq!(s, vec![3, 2]);
        assert_eq!(d, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(permute_data(&[0.0f64; 6], &[2, 3], &[0, 0]).is_err());
    }
}
