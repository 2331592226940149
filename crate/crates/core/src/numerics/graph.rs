//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse.
//! A graph is single-threaded and lives for one forward/backward pass.

use std::cell::{Cell, Ref, RefCell};
use std::sync::Arc;

use super::kernels::{
    self, broadcast_strides, for_each_broadcast, BinaryOp, ExclusionMask,
    MatmulPlan, UnaryOp,
};
use super::macs;
use super::tensor::{numel, Real, Tensor};
use crate::error::{Result, SptError};

enum Op<T: Real> {
    Leaf,
    Constant,
    MatMul {
        a: usize,
        b: usize,
        tb: bool,
        plan: MatmulPlan,
    },
    Binary {
        op: BinaryOp,
        a: usize,
        b: usize,
    },
    Unary {
        op: UnaryOp,
        x: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    AddScalar {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax {
        x: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    GatherRows {
        x: usize,
        row: usize,
        idx: Arc<Vec<Option<usize>>>,
    },
    ScatterRows {
        base: usize,
        src: usize,
        row: usize,
        pairs: Arc<Vec<(usize, usize)>>,
    },
    Sum {
        x: usize,
    },
    MeanAxis {
        x: usize,
        n: usize,
        inner: usize,
    },
    StraightThrough {
        soft: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![a, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::ScatterRows { base, src, .. } => vec![base, src],
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::MaskedSoftmax { x }
            | Op::MaxPool { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Sum { x }
            | Op::MeanAxis { x, .. } => vec![x],
            Op::StraightThrough { soft } => vec![soft],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    relaxed: Cell<bool>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients from one backward pass, indexed by variable.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.get_id(v.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<Tensor<T>> {
        let g = self.grads.get(id)?.as_ref()?;
        Tensor::new(&self.shapes[id], g.clone()).ok()
    }

    /// Gradient as a tensor of zeros when `v` is not reachable from the loss.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            relaxed: Cell::new(false),
        }
    }

    /// In relaxed mode [`Var::straight_through`] forwards the soft value
    /// instead of the hard one. The gradient is unchanged, so the relaxed
    /// function is one whose true derivative equals the straight-through
    /// gradient, which makes it checkable by finite differences.
    pub fn set_relaxed(&self, on: bool) {
        self.relaxed.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            ref other => other.parents().iter().any(|&p| nodes[p].requires_grad),
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if numel(nodes[loss.id].value.shape()) != 1 {
            return Err(SptError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::ONE]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let needs = |p: usize| nodes[p].requires_grad;
            let mut contribs: Vec<(usize, Vec<T>)> = Vec::new();
            backprop_node(&nodes, node, &g, &needs, &mut contribs);
            for (p, c) in contribs {
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(c) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
            // Keep leaf gradients for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            } else if let Some(g) = &grads[id] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(SptError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    needs: &dyn Fn(usize) -> bool,
    out: &mut Vec<(usize, Vec<T>)>,
) {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul { a, b, tb, plan } => {
            let (a, b, tb) = (*a, *b, *tb);
            let (av, bv) = (val(a), val(b));
            let MatmulPlan { m, k, n, .. } = *plan;
            let nb = plan.batches();
            let shared_weight = bv.rank() == 2 && !tb;
            if needs(a) {
                let da = if shared_weight {
                    kernels::gemm(g, false, bv.data(), true, nb * m, n, k)
                } else {
                    let per = kernels::batched_gemm(
                        nb,
                        |i| (i * m * n, (i + 1) * m * n),
                        |i| (plan.b_batch[i] * k * n, (plan.b_batch[i] + 1) * k * n),
                        g,
                        false,
                        bv.data(),
                        !tb,
                        (m, n, k),
                    );
                    accumulate_batches(&per, &plan.a_batch, m * k, av.len())
                };
                out.push((a, da));
            }
            if needs(b) {
                let db = if shared_weight {
                    kernels::gemm(av.data(), true, g, false, k, nb * m, n)
                } else if !tb {
                    let per = kernels::batched_gemm(
                        nb,
                        |i| (plan.a_batch[i] * m * k, (plan.a_batch[i] + 1) * m * k),
                        |i| (i * m * n, (i + 1) * m * n),
                        av.data(),
                        true,
                        g,
                        false,
                        (k, m, n),
                    );
                    accumulate_batches(&per, &plan.b_batch, k * n, bv.len())
                } else {
                    let per = kernels::batched_gemm(
                        nb,
                        |i| (i * m * n, (i + 1) * m * n),
                        |i| (plan.a_batch[i] * m * k, (plan.a_batch[i] + 1) * m * k),
                        g,
                        true,
                        av.data(),
                        false,
                        (n, m, k),
                    );
                    accumulate_batches(&per, &plan.b_batch, n * k, bv.len())
                };
                out.push((b, db));
            }
        }
        Op::Binary { op, a, b } => {
            let (a, b) = (*a, *b);
            let (av, bv) = (val(a), val(b));
            let oshape = node.value.shape();
            let sa = broadcast_strides(av.shape(), oshape);
            let sb = broadcast_strides(bv.shape(), oshape);
            let (ad, bd) = (av.data(), bv.data());
            let mut ga = vec![T::ZERO; av.len()];
            let mut gb = vec![T::ZERO; bv.len()];
            for_each_broadcast(oshape, &sa, &sb, |o, ia, ib| {
                let go = g[o];
                match op {
                    BinaryOp::Add => {
                        ga[ia] += go;
                        gb[ib] += go;
                    }
                    BinaryOp::Sub => {
                        ga[ia] += go;
                        gb[ib] -= go;
                    }
                    BinaryOp::Mul => {
                        ga[ia] += go * bd[ib];
                        gb[ib] += go * ad[ia];
                    }
                    BinaryOp::Max => {
                        if bd[ib] > ad[ia] {
                            gb[ib] += go;
                        } else {
                            ga[ia] += go;
                        }
                    }
                }
            });
            if needs(a) {
                out.push((a, ga));
            }
            if needs(b) {
                out.push((b, gb));
            }
        }
        Op::Unary { op, x } => {
            let xd = val(*x).data();
            let y = node.value.data();
            let dx: Vec<T> = match op {
                UnaryOp::Sigmoid => g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (T::ONE - y))
                    .collect(),
                UnaryOp::Gelu => g
                    .iter()
                    .zip(xd)
                    .map(|(&g, &x)| g * kernels::gelu_grad(x))
                    .collect(),
                UnaryOp::Relu => g
                    .iter()
                    .zip(xd)
                    .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
                    .collect(),
                UnaryOp::Softplus => g
                    .iter()
                    .zip(xd)
                    .map(|(&g, &x)| g * kernels::sigmoid(x))
                    .collect(),
                UnaryOp::Neg => g.iter().map(|&g| -g).collect(),
            };
            out.push((*x, dx));
        }
        Op::Scale { x, factor } => out.push((*x, g.iter().map(|&v| v * *factor).collect())),
        Op::AddScalar { x } => out.push((*x, g.to_vec())),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gm = val(*gamma).data();
            let c = gm.len();
            if needs(*x) {
                let cf = T::from_f64(c as f64);
                let mut dx = vec![T::ZERO; g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut sum_d = T::ZERO;
                    let mut sum_dh = T::ZERO;
                    for j in 0..c {
                        let d = gr[j] * gm[j];
                        sum_d += d;
                        sum_dh += d * hr[j];
                    }
                    for j in 0..c {
                        let d = gr[j] * gm[j];
                        dx[r * c + j] = rs / cf * (cf * d - sum_d - hr[j] * sum_dh);
                    }
                }
                out.push((*x, dx));
            }
            if needs(*gamma) || needs(*beta) {
                let mut dg = vec![T::ZERO; c];
                let mut db = vec![T::ZERO; c];
                for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    dg[i % c] += gv * h;
                    db[i % c] += gv;
                }
                if needs(*gamma) {
                    out.push((*gamma, dg));
                }
                if needs(*beta) {
                    out.push((*beta, db));
                }
            }
        }
        Op::MaskedSoftmax { x } => {
            let y = node.value.data();
            let l = *node.value.shape().last().unwrap_or(&1);
            let mut dx = vec![T::ZERO; y.len()];
            for ((yr, gr), dr) in y.chunks(l).zip(g.chunks(l)).zip(dx.chunks_mut(l)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            out.push((*x, dx));
        }
        Op::MaxPool { x, argmax } => {
            let mut dx = vec![T::ZERO; val(*x).len()];
            for (&src, &gv) in argmax.iter().zip(g) {
                dx[src] += gv;
            }
            out.push((*x, dx));
        }
        Op::Reshape { x } => out.push((*x, g.to_vec())),
        Op::Permute { x, perm } => {
            let inv = kernels::inverse_permutation(perm);
            let (dx, _) = kernels::permute_data(g, node.value.shape(), &inv)
                .expect("inverse of a validated permutation");
            out.push((*x, dx));
        }
        Op::GatherRows { x, row, idx } => {
            let mut dx = vec![T::ZERO; val(*x).len()];
            for (i, src) in idx.iter().enumerate() {
                if let Some(s) = src {
                    for j in 0..*row {
                        dx[s * row + j] += g[i * row + j];
                    }
                }
            }
            out.push((*x, dx));
        }
        Op::ScatterRows {
            base,
            src,
            row,
            pairs,
        } => {
            let row = *row;
            if needs(*base) {
                let mut db = g.to_vec();
                for &(_, d) in pairs.iter() {
                    db[d * row..(d + 1) * row].fill(T::ZERO);
                }
                out.push((*base, db));
            }
            if needs(*src) {
                let mut ds = vec![T::ZERO; val(*src).len()];
                for &(s, d) in pairs.iter() {
                    for j in 0..row {
                        ds[s * row + j] += g[d * row + j];
                    }
                }
                out.push((*src, ds));
            }
        }
        Op::Sum { x } => out.push((*x, vec![g[0]; val(*x).len()])),
        Op::MeanAxis { x, n, inner } => {
            let (n, inner) = (*n, *inner);
            let inv = T::ONE / T::from_f64(n as f64);
            let mut dx = vec![T::ZERO; val(*x).len()];
            for (i, d) in dx.iter_mut().enumerate() {
                let o = i / (n * inner);
                let c = i % inner;
                *d = g[o * inner + c] * inv;
            }
            out.push((*x, dx));
        }
        Op::StraightThrough { soft } => out.push((*soft, g.to_vec())),
        Op::CrossEntropy {
            logits,
            probs,
            targets,
        } => {
            let k = probs.len() / targets.len();
            let scale = g[0] / T::from_f64(targets.len() as f64);
            let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &t) in targets.iter().enumerate() {
                dx[i * k + t] -= scale;
            }
            out.push((*logits, dx));
        }
    }
}

fn accumulate_batches<T: Real>(per: &[T], map: &[usize], size: usize, total: usize) -> Vec<T> {
    let mut acc = vec![T::ZERO; total];
    for (i, &dst) in map.iter().enumerate() {
        for (a, &v) in acc[dst * size..(dst + 1) * size]
            .iter_mut()
            .zip(&per[i * size..(i + 1) * size])
        {
            *a += v;
        }
    }
    acc
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        self.graph.value(*self)
    }

    /// Owned copy of the current value.
    pub fn tensor(&self) -> Tensor<T> {
        let mut t = self.value().clone();
        t.grad = None;
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_graph(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(SptError::Usage("operands belong to different graphs".into()))
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op)
    }

    fn matmul_ex(&self, rhs: Var<'g, T>, tb: bool) -> Result<Var<'g, T>> {
        self.same_graph(&rhs)?;
        let (value, plan) = {
            let (a, b) = (self.value(), rhs.value());
            let plan = kernels::plan_matmul(a.shape(), b.shape(), tb)?;
            macs::record((plan.batches() * plan.m * plan.n * plan.k) as u64);
            let data = kernels::matmul_data(&plan, a.data(), b.data(), b.rank(), tb);
            (
                Tensor::new(&plan.out_shape(), data)?.ensure_finite("matmul")?,
                plan,
            )
        };
        Ok(self.push(
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                tb,
                plan,
            },
        ))
    }

    pub fn matmul(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_ex(rhs, false)
    }

    /// `self · rhsᵀ` over the last two axes.
    pub fn matmul_nt(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_ex(rhs, true)
    }

    fn binary(&self, op: BinaryOp, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&rhs)?;
        let value = kernels::binary(op, &self.value(), &rhs.value())?;
        Ok(self.push(
            value,
            Op::Binary {
                op,
                a: self.id,
                b: rhs.id,
            },
        ))
    }

    pub fn add(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn maximum(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Max, rhs)
    }

    fn unary(&self, op: UnaryOp) -> Result<Var<'g, T>> {
        let value = kernels::unary(op, &self.value())?;
        Ok(self.push(value, Op::Unary { op, x: self.id }))
    }

    pub fn sigmoid(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn gelu(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryOp::Gelu)
    }

    pub fn relu(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryOp::Relu)
    }

    pub fn softplus(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryOp::Softplus)
    }

    pub fn neg(&self) -> Result<Var<'g, T>> {
        self.unary(UnaryOp::Neg)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'g, T>> {
        let f = T::from_f64(factor);
        let value = self.value().map(|v| v * f).ensure_finite("scale")?;
        Ok(self.push(
            value,
            Op::Scale {
                x: self.id,
                factor: f,
            },
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'g, T>> {
        let c = T::from_f64(c);
        let value = self.value().map(|v| v + c).ensure_finite("add_scalar")?;
        Ok(self.push(value, Op::AddScalar { x: self.id }))
    }

    pub fn layer_norm(&self, gamma: Var<'g, T>, beta: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&gamma)?;
        self.same_graph(&beta)?;
        let (value, xhat, rstd) = {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            // Validates shapes.
            kernels::layer_norm(&x, &gm, &bt, kernels::LAYER_NORM_EPS)?;
            let o = kernels::layer_norm_data(
                x.data(),
                gm.data(),
                bt.data(),
                T::from_f64(kernels::LAYER_NORM_EPS),
            );
            (Tensor::new(x.shape(), o.y)?, o.xhat, o.rstd)
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    pub fn masked_softmax(&self, mask: Option<&ExclusionMask>) -> Result<Var<'g, T>> {
        let value = kernels::masked_softmax_lastdim(&self.value(), mask)?;
        Ok(self.push(value, Op::MaskedSoftmax { x: self.id }))
    }

    pub fn max_pool_2x2(&self) -> Result<Var<'g, T>> {
        let (value, argmax) = {
            let x = self.value();
            let shape = kernels::pool_shape(x.shape())?;
            let (vals, arg) = kernels::max_pool_data(x.data(), x.shape())?;
            (Tensor::new(&shape, vals)?, arg)
        };
        Ok(self.push(value, Op::MaxPool { x: self.id, argmax }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let value = self.tensor().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: self.id }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            let (d, s) = kernels::permute_data(x.data(), x.shape(), perm)?;
            Tensor::new(&s, d)?
        };
        Ok(self.push(
            value,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Views `self` as rows of width `row` and gathers them by index into a
    /// `[idx.len(), row]` result. `None` entries produce zero rows.
    pub fn gather_rows(&self, row: usize, idx: Arc<Vec<Option<usize>>>) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            if row == 0 || !x.len().is_multiple_of(row) {
                return Err(SptError::dim(
                    "gather_rows",
                    format!("{:?} is not a whole number of rows of {row}", x.shape()),
                ));
            }
            kernels::check_row_indices("gather_rows", x.len() / row, idx.iter().flatten().copied())?;
            Tensor::new(&[idx.len(), row], kernels::gather_rows_data(x.data(), row, &idx))?
        };
        Ok(self.push(value, Op::GatherRows { x: self.id, row, idx }))
    }

    /// Copy of `self` (as rows of width `row`) where row `dst` is replaced
    /// by row `src` of `source`, for each `(src, dst)` pair.
    pub fn scatter_rows(
        &self,
        source: Var<'g, T>,
        row: usize,
        pairs: Arc<Vec<(usize, usize)>>,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&source)?;
        let value = {
            let (base, src) = (self.value(), source.value());
            if row == 0 || base.len() % row != 0 || src.len() % row != 0 {
                return Err(SptError::dim(
                    "scatter_rows",
                    format!("{:?} / {:?} with row {row}", base.shape(), src.shape()),
                ));
            }
            kernels::check_row_indices("scatter_rows", src.len() / row, pairs.iter().map(|p| p.0))?;
            kernels::check_row_indices("scatter_rows", base.len() / row, pairs.iter().map(|p| p.1))?;
            let mut data = base.data().to_vec();
            for &(s, d) in pairs.iter() {
                data[d * row..(d + 1) * row].copy_from_slice(&src.data()[s * row..(s + 1) * row]);
            }
            Tensor::new(base.shape(), data)?
        };
        Ok(self.push(
            value,
            Op::ScatterRows {
                base: self.id,
                src: source.id,
                row,
                pairs,
            },
        ))
    }

    pub fn sum(&self) -> Result<Var<'g, T>> {
        let s: T = self.value().data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: self.id }).check("sum")
    }

    pub fn mean(&self) -> Result<Var<'g, T>> {
        let n = self.value().len().max(1);
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            let s = x.shape();
            if axis >= s.len() || s[axis] == 0 {
                return Err(SptError::dim("mean_axis", format!("axis {axis} of {s:?}")));
            }
            let outer: usize = s[..axis].iter().product();
            let n = s[axis];
            let inner: usize = s[axis + 1..].iter().product();
            let inv = T::ONE / T::from_f64(n as f64);
            let mut data = vec![T::ZERO; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for c in 0..inner {
                        data[o * inner + c] += x.data()[(o * n + j) * inner + c];
                    }
                }
            }
            data.iter_mut().for_each(|v| *v *= inv);
            let mut shape = s.to_vec();
            shape.remove(axis);
            (Tensor::new(&shape, data)?, n, inner)
        };
        let (value, n, inner) = value;
        Ok(self.push(value, Op::MeanAxis { x: self.id, n, inner }))
    }

    /// Forward value `hard`, gradient passed unchanged to `self`. Equivalent
    /// to `hard + (self - stop_gradient(self))`.
    pub fn straight_through(&self, hard: Tensor<T>) -> Result<Var<'g, T>> {
        if hard.shape() != self.value().shape() {
            return Err(SptError::dim(
                "straight_through",
                format!("{:?} vs {:?}", hard.shape(), self.shape()),
            ));
        }
        let value = if self.graph.relaxed.get() { self.tensor() } else { hard };
        Ok(self.push(value, Op::StraightThrough { soft: self.id }))
    }

    /// A constant copy of this value: the stop-gradient.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant(self.tensor())
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class ids.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'g, T>> {
        let (loss, probs) = {
            let x = self.value();
            let [b, k] = *x.shape() else {
                return Err(SptError::dim("cross_entropy", format!("logits {:?}", x.shape())));
            };
            if b != targets.len() || targets.iter().any(|&t| t >= k) {
                return Err(SptError::dim(
                    "cross_entropy",
                    format!("{b}x{k} logits vs targets {targets:?}"),
                ));
            }
            let probs = kernels::masked_softmax_data(x.data(), k, None);
            let mut loss = T::ZERO;
            for (i, &t) in targets.iter().enumerate() {
                let row = &x.data()[i * k..(i + 1) * k];
                let mx = row.iter().copied().fold(row[0], T::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
                loss += lse - row[t];
            }
            (loss / T::from_f64(b as f64), probs)
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                probs,
                targets: targets.to_vec(),
            },
        )
        .check("cross_entropy")
    }

    fn check(self, op: &'static str) -> Result<Self> {
        if self.value().all_finite() {
            Ok(self)
        } else {
            Err(SptError::NonFinite { op })
        }
    }
}
