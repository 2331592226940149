//! Self-verification suites: packing invariants, finite-difference
//! gradients, dense equivalence of the SPA block and cost-model parity.
//!
//! Each suite returns a list of [`Check`]s carrying the tolerance and the
//! observed value, so a failing run names exactly what broke.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    self, block_param_shapes, init_param, multi_head_attention, spa_block, window_attention_block,
    BlockParams,
};
use crate::config::{ModelConfig, SelectionPolicy};
use crate::cost::{self, flops_msa, flops_spa, flops_wmsa, padding_waste};
use crate::error::{Result, SptError};
use crate::numerics::gradcheck::{finite_diff_check_with, GradCheckOptions};
use crate::numerics::{macs, ExclusionMask, Graph, Real, Tensor, Var};
use crate::packing::{build_packing_plan, build_same_image_mask, pack_tokens, unpack_scatter, PackingPlan};
use crate::selection::{self, GateParams, Mode};
use crate::types::{KeepMask, ScoreMap, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Packing,
    Gradients,
    Equivalence,
    Cost,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Packing, Suite::Gradients, Suite::Equivalence, Suite::Cost];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Packing => "packing",
            Suite::Gradients => "gradients",
            Suite::Equivalence => "equivalence",
            Suite::Cost => "cost",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a suite name; `all` expands to every suite.
pub fn parse_suites(s: &str) -> Result<Vec<Suite>> {
    if s == "all" {
        return Ok(Suite::ALL.to_vec());
    }
    Ok(vec![s.parse()?])
}

impl FromStr for Suite {
    type Err = SptError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| SptError::Usage(format!("unknown suite {s:?}")))
    }
}

/// Deliberate defects for checking that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Marks one cross-image pair of slots as mutually visible in the
    /// attention mask used by the isolation check.
    FlipMaskBit,
}

impl FromStr for Fault {
    type Err = SptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask-bit" => Ok(Fault::FlipMaskBit),
            _ => Err(SptError::Usage(format!("unknown fault {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub packing_cases: usize,
    pub equivalence_configs: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            packing_cases: 1000,
            equivalence_configs: 50,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub tolerance: String,
    pub observed: String,
    pub passed: bool,
}

impl Check {
    fn new(suite: Suite, name: impl Into<String>, tolerance: impl Into<String>, observed: impl Into<String>, passed: bool) -> Self {
        Check {
            suite,
            name: name.into(),
            tolerance: tolerance.into(),
            observed: observed.into(),
            passed,
        }
    }

    fn below(suite: Suite, name: impl Into<String>, observed: f64, tol: f64) -> Self {
        Check::new(suite, name, format!("< {tol:e}"), format!("{observed:e}"), observed < tol)
    }

    fn zero_failures(suite: Suite, name: impl Into<String>, failures: usize, cases: usize) -> Self {
        Check::new(
            suite,
            name,
            "0 failures",
            format!("{failures} of {cases}"),
            failures == 0,
        )
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} tolerance: {} observed: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.tolerance,
            self.observed
        )
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<Check>> {
    match suite {
        Suite::Packing => packing_suite(opts),
        Suite::Gradients => gradient_suite(opts),
        Suite::Equivalence => equivalence_suite(opts),
        Suite::Cost => cost_suite(opts),
    }
}

fn random_tensor<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect()).expect("shape and data agree")
}

fn random_block<'g, T: Real, R: Rng>(
    g: &'g Graph<T>,
    c: usize,
    heads: usize,
    window: Option<usize>,
    rng: &mut R,
) -> Result<BlockParams<'g, T>> {
    // Non-zero biases and affine terms so that every parameter matters.
    let shapes = block_param_shapes(c, heads, window);
    let mut leaves = Vec::new();
    for (name, shape) in &shapes {
        let t: Tensor<T> = if shape.len() == 2 && name.ends_with("weight") {
            init_param(name, shape, rng)
        } else {
            random_tensor::<T, _>(shape, rng).map(|v| v * T::from_f64(0.5))
        };
        let t = if name.ends_with("gamma") { t.map(|v| v + T::ONE) } else { t };
        leaves.push((*name, g.leaf(t)));
    }
    BlockParams::bind(heads, window.is_some(), |name| {
        leaves
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| SptError::Usage(format!("missing parameter {name}")))
    })
}

// ---------------------------------------------------------------------------
// packing

fn plan_violations(plan: &PackingPlan, keep: &KeepMask) -> usize {
    let mut bad = 0;
    let n = keep.tokens_per_image();
    let selected: Vec<(usize, usize)> = keep
        .keep
        .iter()
        .enumerate()
        .filter(|(_, &k)| k)
        .map(|(f, _)| (f / n, f % n))
        .collect();
    bad += usize::from(selected.len() != plan.entries.len());
    bad += usize::from(plan.num_selected != selected.len());
    bad += usize::from(plan.num_containers != selected.len().div_ceil(plan.len));
    let mut seen = vec![false; plan.num_containers * plan.len];
    for (pos, (e, &(img, src))) in plan.entries.iter().zip(&selected).enumerate() {
        bad += usize::from(e.image_id != img || e.src_index != src);
        bad += usize::from(e.container != pos / plan.len || e.slot != pos % plan.len);
        match seen.get_mut(e.container * plan.len + e.slot) {
            Some(s) if !*s => *s = true,
            _ => bad += 1,
        }
    }
    bad
}

/// Output rows of masked attention over packed containers, one per slot.
fn isolated_attention(
    grid: &Tensor<f32>,
    plan: &PackingPlan,
    params: &[(&'static str, Tensor<f32>)],
    heads: usize,
    fault: Option<(usize, usize)>,
) -> Result<Vec<f32>> {
    let g = Graph::new();
    let leaves: Vec<_> = params.iter().map(|(n, t)| (*n, g.constant(t.clone()))).collect();
    let p = BlockParams::bind(heads, false, |name| {
        Ok(leaves.iter().find(|(n, _)| *n == name).expect("all names present").1)
    })?;
    let x = TokenGrid::new(g.constant(grid.clone()))?;
    let packed = pack_tokens(&x, plan)?;
    let mut mask = build_same_image_mask(&packed.slot_image, plan.len)?.to_exclusion();
    if let Some((slot_i, slot_j)) = fault {
        let (c, i, j) = (slot_i / plan.len, slot_i % plan.len, slot_j % plan.len);
        mask.valid[(c * plan.len + i) * plan.len + j] = true;
    }
    let out = multi_head_attention(packed.values, &p, None, Some(&mask), 1)?;
    let v = out.tensor().into_data();
    Ok(v)
}

/// First container pair (reader slot of another image, slot of `victim`).
fn cross_pair(slot_image: &[Option<usize>], len: usize, victim: usize) -> Option<(usize, usize)> {
    for (c, chunk) in slot_image.chunks(len).enumerate() {
        for (i, a) in chunk.iter().enumerate() {
            for (j, b) in chunk.iter().enumerate() {
                if matches!((a, b), (Some(x), Some(y)) if *x != victim && *y == victim) {
                    return Some((c * len + i, c * len + j));
                }
            }
        }
    }
    None
}

pub fn packing_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let suite = Suite::Packing;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cases = opts.packing_cases;
    let (mut bijection, mut pad, mut round_trip, mut gather, mut mask_bad) = (0, 0, 0, 0, 0);
    let (mut isolation, mut isolation_cases, mut block_isolation, mut block_cases) = (0, 0, 0, 0);
    for _ in 0..cases {
        let b = rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let heads = rng.gen_range(1..=2);
        let c = heads * rng.gen_range(1..=3);
        let len = rng.gen_range(1..=9);
        let density: f64 = rng.gen_range(0.0..=1.0);
        let keep = KeepMask::new(b, h, w, (0..b * h * w).map(|_| rng.gen_bool(density)).collect())?;
        let plan = build_packing_plan(&keep, len)?;
        bijection += usize::from(plan_violations(&plan, &keep) > 0);
        pad += usize::from(plan.pad_count >= len || plan.pad_count != plan.num_containers * len - plan.num_selected);

        let x: Tensor<f32> = random_tensor(&[b, h, w, c], &mut rng);
        let g = Graph::new();
        let grid = TokenGrid::new(g.constant(x.clone()))?;
        let packed = pack_tokens(&grid, &plan)?;
        {
            let pv = packed.values.value();
            let mut ok = pv.shape() == [plan.num_containers, len, c];
            let slots = plan.slot_image();
            for (s, img) in slots.iter().enumerate() {
                if img.is_none() {
                    ok &= pv.data()[s * c..(s + 1) * c].iter().all(|&v| v == 0.0);
                }
            }
            for e in &plan.entries {
                let s = e.container * len + e.slot;
                let src = e.image_id * h * w + e.src_index;
                ok &= pv.data()[s * c..(s + 1) * c] == x.data()[src * c..(src + 1) * c];
            }
            ok &= packed.slot_image == slots;
            gather += usize::from(!ok);
        }
        let zeros = TokenGrid::new(g.constant(Tensor::zeros(&[b, h, w, c])))?;
        let onto_zero = unpack_scatter(&packed, &plan, &zeros)?;
        let onto_self = unpack_scatter(&packed, &plan, &grid)?;
        {
            let z = onto_zero.values.value();
            let mut ok = onto_self.values.value().data() == x.data();
            for (t, &k) in keep.keep.iter().enumerate() {
                let want = if k { &x.data()[t * c..(t + 1) * c] } else { &[0.0f32; 6][..c] };
                ok &= &z.data()[t * c..(t + 1) * c] == want;
            }
            round_trip += usize::from(!ok);
        }

        let mask = build_same_image_mask(&packed.slot_image, len)?;
        let slots = &packed.slot_image;
        let mut mbad = usize::from(mask.containers != plan.num_containers);
        for ct in 0..plan.num_containers {
            for i in 0..len {
                for j in 0..len {
                    let want = matches!((slots[ct * len + i], slots[ct * len + j]), (Some(a), Some(b)) if a == b);
                    mbad += usize::from(mask.get(ct, i, j) != want);
                }
            }
        }
        mask_bad += usize::from(mbad > 0);

        let counts = keep.per_image_counts();
        let populated: Vec<usize> = (0..b).filter(|&i| counts[i] > 0).collect();
        if populated.len() >= 2 {
            isolation_cases += 1;
            let victim = populated[rng.gen_range(0..populated.len())];
            let params: Vec<_> = block_param_shapes(c, heads, None)
                .into_iter()
                .map(|(n, s)| (n, random_tensor::<f32, _>(&s, &mut rng)))
                .collect();
            let mut y = x.clone();
            let n = h * w;
            for v in &mut y.data_mut()[victim * n * c..(victim + 1) * n * c] {
                *v = rng.gen_range(-10.0..10.0);
            }
            let fault = match opts.fault {
                Some(Fault::FlipMaskBit) => cross_pair(slots, len, victim),
                None => None,
            };
            let before = isolated_attention(&x, &plan, &params, heads, fault)?;
            let after = isolated_attention(&y, &plan, &params, heads, fault)?;
            let mut differs = false;
            for (s, img) in slots.iter().enumerate() {
                if matches!(img, Some(i) if *i != victim) {
                    differs |= before[s * c..(s + 1) * c] != after[s * c..(s + 1) * c];
                }
            }
            isolation += usize::from(differs);

            if h % 2 == 0 && w % 2 == 0 {
                block_cases += 1;
                block_isolation += usize::from(!spa_block_isolated(&x, &y, victim, c, heads, len, &mut rng)?);
            }
        }
    }
    Ok(vec![
        Check::zero_failures(suite, "plan_bijection", bijection, cases),
        Check::zero_failures(suite, "pad_count_below_len", pad, cases),
        Check::zero_failures(suite, "gather_matches_oracle", gather, cases),
        Check::zero_failures(suite, "round_trip_exact", round_trip, cases),
        Check::zero_failures(suite, "same_image_mask_matches_oracle", mask_bad, cases),
        Check::zero_failures(suite, "cross_image_isolation_bit_exact", isolation, isolation_cases),
        Check::zero_failures(suite, "spa_block_isolation_bit_exact", block_isolation, block_cases),
    ])
}

/// Runs a full SPA block on `x` and on `y` (which differ only in image
/// `victim`) and reports whether every other image's output is identical.
/// Selection keeps the same number of tokens per image, so the victim
/// cannot move other images between containers.
fn spa_block_isolated<R: Rng>(
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    victim: usize,
    c: usize,
    heads: usize,
    len: usize,
    rng: &mut R,
) -> Result<bool> {
    let seed: u64 = rng.gen();
    // A fixed per-image count keeps every other image in the same slots.
    let cfg = ModelConfig {
        package_len: len,
        selection: SelectionPolicy::TopFraction(rng.gen_range(0.1..=1.0)),
        ..ModelConfig::micro()
    };
    let run = |input: &Tensor<f32>| -> Result<Vec<f32>> {
        let mut prng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::new();
        let p = random_block(&g, c, heads, None, &mut prng)?;
        let gate = GateParams {
            weight: g.constant(random_tensor(&[c, 1], &mut prng)),
            bias: g.constant(Tensor::zeros(&[1])),
        };
        let grid = TokenGrid::new(g.constant(input.clone()))?;
        let out = spa_block(&grid, None, &p, &gate, &cfg, false, Mode::Eval, &mut prng)?;
        let v = out.grid.values.tensor().into_data();
        Ok(v)
    };
    let (a, b) = (run(x)?, run(y)?);
    let per_image = x.len() / x.shape()[0];
    Ok((0..x.shape()[0])
        .filter(|&i| i != victim)
        .all(|i| a[i * per_image..(i + 1) * per_image] == b[i * per_image..(i + 1) * per_image]))
}

// ---------------------------------------------------------------------------
// gradients

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error of composite blocks, where
/// round-off in exactly-zero gradients (a key bias, say) is ~1e-12.
const BLOCK_FLOOR: f64 = 1e-6;

type Scalar<'g> = Result<Var<'g, f64>>;

struct GradCase {
    name: &'static str,
    params: Vec<Tensor<f64>>,
    floor: f64,
    f: Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Scalar<'g>>,
}

/// `Σ out ⊙ W` for a fixed random `W` of mean magnitude `1/len`, turning
/// any output into an order-one scalar with a generic gradient.
fn project<'g>(out: Var<'g, f64>, w: &Tensor<f64>) -> Scalar<'g> {
    let w = out.graph().constant(w.clone().reshape(&out.shape())?);
    out.mul(w)?.sum()
}

fn case(
    name: &'static str,
    params: Vec<Tensor<f64>>,
    out_len: usize,
    rng: &mut ChaCha8Rng,
    f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Scalar<'g> + 'static,
) -> GradCase {
    let w: Tensor<f64> = random_tensor::<f64, _>(&[out_len], rng).map(|v| v / out_len as f64);
    GradCase {
        name,
        params,
        floor: 1e-12,
        f: Box::new(move |g, v| project(f(g, v)?, &w)),
    }
}

/// Values bounded away from zero, for kinked functions.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn kernel_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| random_tensor::<f64, _>(shape, rng);
    let mut cases = Vec::new();
    cases.push(case("matmul", vec![r(&[2, 3, 4], rng), r(&[4, 5], rng)], 30, rng, |_, v| v[0].matmul(v[1])));
    cases.push(case("matmul_batched", vec![r(&[2, 3, 4], rng), r(&[2, 4, 5], rng)], 30, rng, |_, v| {
        v[0].matmul(v[1])
    }));
    cases.push(case("matmul_nt", vec![r(&[2, 3, 4], rng), r(&[2, 5, 4], rng)], 30, rng, |_, v| {
        v[0].matmul_nt(v[1])
    }));
    cases.push(case("add_broadcast", vec![r(&[2, 3, 4], rng), r(&[4], rng)], 24, rng, |_, v| v[0].add(v[1])));
    cases.push(case("sub", vec![r(&[3, 4], rng), r(&[3, 4], rng)], 12, rng, |_, v| v[0].sub(v[1])));
    cases.push(case("mul_broadcast", vec![r(&[2, 3, 4], rng), r(&[3, 1], rng)], 24, rng, |_, v| v[0].mul(v[1])));
    {
        let a = r(&[3, 4], rng);
        let b = a.map(|x| if x > 0.0 { x - 0.3 } else { x + 0.3 });
        cases.push(case("maximum", vec![a, b], 12, rng, |_, v| v[0].maximum(v[1])));
    }
    cases.push(case("sigmoid", vec![r(&[3, 4], rng).map(|x| 3.0 * x)], 12, rng, |_, v| v[0].sigmoid()));
    cases.push(case("gelu", vec![r(&[3, 4], rng).map(|x| 3.0 * x)], 12, rng, |_, v| v[0].gelu()));
    cases.push(case("relu", vec![away_from_zero(&[3, 4], rng)], 12, rng, |_, v| v[0].relu()));
    cases.push(case("softplus", vec![r(&[3, 4], rng).map(|x| 4.0 * x)], 12, rng, |_, v| v[0].softplus()));
    cases.push(case("neg", vec![r(&[5], rng)], 5, rng, |_, v| v[0].neg()));
    cases.push(case("scale", vec![r(&[5], rng)], 5, rng, |_, v| v[0].scale(-1.7)));
    cases.push(case("add_scalar", vec![r(&[5], rng)], 5, rng, |_, v| v[0].add_scalar(0.3)));
    cases.push(case(
        "layer_norm",
        vec![r(&[4, 6], rng), r(&[6], rng), r(&[6], rng)],
        24,
        rng,
        |_, v| v[0].layer_norm(v[1], v[2]),
    ));
    cases.push(case("softmax", vec![r(&[2, 3, 5], rng)], 30, rng, |_, v| v[0].masked_softmax(None)));
    {
        let valid: Vec<bool> = (0..2 * 4 * 4).map(|i| i % 4 == i / 4 % 4 || (i * 7) % 3 == 0).collect();
        let mask = Arc::new(ExclusionMask::new(&[2, 1, 4, 4], valid).expect("valid mask"));
        cases.push(case("masked_softmax", vec![r(&[2, 3, 4, 4], rng)], 96, rng, move |_, v| {
            v[0].masked_softmax(Some(&mask))
        }));
    }
    {
        let mut x = r(&[2, 4, 4, 3], rng);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += 0.05 * i as f64;
        }
        cases.push(case("max_pool_2x2", vec![x], 24, rng, |_, v| v[0].max_pool_2x2()));
    }
    cases.push(case("reshape_permute", vec![r(&[2, 3, 4], rng)], 24, rng, |_, v| {
        v[0].reshape(&[3, 2, 4])?.permute(&[2, 0, 1])
    }));
    {
        let idx = Arc::new(vec![Some(2), None, Some(0), Some(2)]);
        cases.push(case("gather_rows", vec![r(&[3, 4], rng)], 16, rng, move |_, v| {
            v[0].gather_rows(4, Arc::clone(&idx))
        }));
    }
    {
        let pairs = Arc::new(vec![(0, 3), (1, 0)]);
        cases.push(case("scatter_rows", vec![r(&[4, 3], rng), r(&[2, 3], rng)], 12, rng, move |_, v| {
            v[0].scatter_rows(v[1], 3, Arc::clone(&pairs))
        }));
    }
    cases.push(case("sum", vec![r(&[3, 4], rng)], 1, rng, |_, v| v[0].sum()));
    cases.push(case("mean", vec![r(&[3, 4], rng)], 1, rng, |_, v| v[0].mean()));
    cases.push(case("mean_axis", vec![r(&[2, 3, 4], rng)], 8, rng, |_, v| v[0].mean_axis(1)));
    cases.push(case("cross_entropy", vec![r(&[3, 5], rng).map(|x| 2.0 * x)], 1, rng, |_, v| {
        v[0].cross_entropy(&[4, 0, 2])
    }));
    {
        let hard = Tensor::from_f64(&[4], &[1.0, 0.0, 1.0, 1.0]).expect("four values");
        cases.push(case("straight_through", vec![r(&[4], rng)], 4, rng, move |g, v| {
            g.set_relaxed(true);
            v[0].sigmoid()?.straight_through(hard.clone())
        }));
    }
    {
        let bias = r(&[2, 3, 3], rng);
        let valid: Vec<bool> = (0..9).map(|i| i % 4 == 0 || i == 1 || i == 5).collect();
        let mask = Arc::new(ExclusionMask::new(&[1, 1, 3, 3], valid).expect("valid mask"));
        cases.push(case(
            "attention_core",
            vec![r(&[2, 3, 4], rng), r(&[2, 3, 4], rng), r(&[2, 3, 4], rng), bias],
            24,
            rng,
            move |_, v| attention::attention_core(v[0], v[1], v[2], 2, Some(v[3]), Some(&mask), 2),
        ));
    }
    cases
}

fn block_params_for(c: usize, heads: usize, window: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let g = Graph::new();
    let p = random_block(&g, c, heads, window, rng).expect("valid block shape");
    p.vars().iter().map(|v| v.tensor()).collect()
}

fn bind_block<'g>(vars: &[Var<'g, f64>], heads: usize, windowed: bool) -> Result<BlockParams<'g, f64>> {
    let names: Vec<&str> = block_param_shapes(vars[0].shape()[0], heads, windowed.then_some(2))
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    BlockParams::bind(heads, windowed, |name| {
        let i = names.iter().position(|n| *n == name).expect("known name");
        Ok(vars[i])
    })
}

fn block_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let (c, heads) = (4, 2);
    let mut cases = Vec::new();
    for shifted in [false, true] {
        let mut params = vec![random_tensor(&[1, 4, 4, c], rng)];
        params.extend(block_params_for(c, heads, Some(2), rng));
        let mut case = case(
            if shifted { "window_block_shifted" } else { "window_block" },
            params,
            64,
            rng,
            move |_, v| {
                let p = bind_block(&v[1..], heads, true)?;
                let x = TokenGrid::new(v[0])?;
                Ok(window_attention_block(&x, &p, shifted, 2)?.values)
            },
        );
        case.floor = BLOCK_FLOOR;
        cases.push(case);
    }

    // Full SPA block: Gumbel noise frozen by re-seeding, straight-through
    // relaxed so the finite difference sees the surrogate gradient.
    let mut params = vec![random_tensor(&[2, 4, 4, c], rng)];
    params.extend(block_params_for(c, heads, None, rng));
    params.push(random_tensor(&[c, 1], rng));
    params.push(Tensor::from_f64(&[1], &[0.3]).expect("one value"));
    params.push(random_tensor(&[2, 8, 8, 1], rng).map(|x| 2.0 * x));
    let n_block = block_param_shapes(c, heads, None).len();
    let cfg = ModelConfig {
        package_len: 3,
        tau: 0.5,
        ..ModelConfig::micro()
    };
    let mut spa = case("spa_block_frozen_noise", params, 2 * 16 * c, rng, move |g, v| {
        g.set_relaxed(true);
        let mut noise = ChaCha8Rng::seed_from_u64(17);
        let p = bind_block(&v[1..1 + n_block], heads, false)?;
        let gate = GateParams {
            weight: v[1 + n_block],
            bias: v[2 + n_block],
        };
        let up = ScoreMap::new(v[3 + n_block])?;
        let x = TokenGrid::new(v[0])?;
        Ok(spa_block(&x, Some(&up), &p, &gate, &cfg, true, Mode::Train, &mut noise)?.grid.values)
    });
    spa.floor = BLOCK_FLOOR;
    cases.push(spa);

    let labels = Tensor::from_f64(&[1, 2, 2, 1], &[1.0, 0.0, 0.0, 1.0]).expect("four values");
    let labels_up = Tensor::new(&[1, 4, 4, 1], (0..16).map(|i| f64::from(i % 3 == 0)).collect()).expect("sixteen values");
    cases.push(GradCase {
        name: "select_loss",
        params: vec![random_tensor(&[1, 2, 2, 1], rng), random_tensor(&[1, 4, 4, 1], rng)],
        floor: 1e-12,
        f: Box::new(move |g, v| {
            let a = (ScoreMap::new(v[0])?, g.constant(labels.clone()));
            let b = (ScoreMap::new(v[1])?, g.constant(labels_up.clone()));
            selection::select_loss(&[a, b])
        }),
    });
    cases
}

pub fn gradient_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6a1d);
    let mut cases = kernel_cases(&mut rng);
    cases.extend(block_cases(&mut rng));
    let mut checks = Vec::with_capacity(cases.len());
    for c in cases {
        let report = finite_diff_check_with(
            |g, v| (c.f)(g, v),
            &c.params,
            GradCheckOptions {
                step: 1e-5,
                coords_per_param: 0,
                floor: c.floor,
            },
        )?;
        checks.push(Check::below(Suite::Gradients, c.name, report.max_rel_error, GRADIENT_TOLERANCE));
    }
    Ok(checks)
}

// ---------------------------------------------------------------------------
// dense equivalence

/// Plain `f64` weights of one pre-norm attention block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub heads: usize,
    pub c: usize,
    pub ln1: (Vec<f64>, Vec<f64>),
    pub q: (Vec<f64>, Vec<f64>),
    pub k: (Vec<f64>, Vec<f64>),
    pub v: (Vec<f64>, Vec<f64>),
    pub o: (Vec<f64>, Vec<f64>),
    pub ln2: (Vec<f64>, Vec<f64>),
    pub ffn1: (Vec<f64>, Vec<f64>),
    pub ffn2: (Vec<f64>, Vec<f64>),
}

impl BlockWeights {
    pub fn from_params<T: Real>(p: &BlockParams<'_, T>) -> Self {
        let d = |v: Var<'_, T>| v.value().to_f64_vec();
        BlockWeights {
            heads: p.heads,
            c: p.channels(),
            ln1: (d(p.ln1_gamma), d(p.ln1_beta)),
            q: (d(p.wq), d(p.bq)),
            k: (d(p.wk), d(p.bk)),
            v: (d(p.wv), d(p.bv)),
            o: (d(p.wo), d(p.bo)),
            ln2: (d(p.ln2_gamma), d(p.ln2_beta)),
            ffn1: (d(p.w1), d(p.b1)),
            ffn2: (d(p.w2), d(p.b2)),
        }
    }
}

fn ln_row(row: &[f64], (gamma, beta): &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rs = 1.0 / (var + 1e-5).sqrt();
    row.iter().enumerate().map(|(i, v)| (v - mean) * rs * gamma[i] + beta[i]).collect()
}

fn linear_row(row: &[f64], (w, b): &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
        .collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

/// Pre-norm multi-head self-attention plus feed-forward block applied to
/// all `n` tokens of each of `b` images, written as plain loops.
pub fn dense_block_reference(x: &[f64], b: usize, n: usize, w: &BlockWeights) -> Vec<f64> {
    let c = w.c;
    let hd = c / w.heads;
    let mut out = vec![0.0; x.len()];
    for img in 0..b {
        let tok = |t: usize| &x[(img * n + t) * c..(img * n + t + 1) * c];
        let z: Vec<Vec<f64>> = (0..n).map(|t| ln_row(tok(t), &w.ln1)).collect();
        let q: Vec<Vec<f64>> = z.iter().map(|r| linear_row(r, &w.q)).collect();
        let k: Vec<Vec<f64>> = z.iter().map(|r| linear_row(r, &w.k)).collect();
        let v: Vec<Vec<f64>> = z.iter().map(|r| linear_row(r, &w.v)).collect();
        for t in 0..n {
            let mut o = vec![0.0; c];
            for h in 0..w.heads {
                let r = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = (0..n)
                    .map(|u| {
                        q[t][r.clone()].iter().zip(&k[u][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let sum: f64 = e.iter().sum();
                for u in 0..n {
                    for j in r.clone() {
                        o[j] += e[u] / sum * v[u][j];
                    }
                }
            }
            let a = linear_row(&o, &w.o);
            let hrow: Vec<f64> = tok(t).iter().zip(&a).map(|(x, a)| x + a).collect();
            let hidden: Vec<f64> = linear_row(&ln_row(&hrow, &w.ln2), &w.ffn1).into_iter().map(gelu).collect();
            let f = linear_row(&hidden, &w.ffn2);
            for j in 0..c {
                out[(img * n + t) * c + j] = hrow[j] + f[j];
            }
        }
    }
    out
}

/// Largest elementwise difference relative to the largest reference value.
pub fn max_relative_diff(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-30);
    got.iter().zip(want).fold(0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

/// One random configuration: `f32` SPA block with every token selected and
/// the whole image in one container, against the `f64` dense reference on
/// the gated input.
fn equivalence_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let side = [2, 4, 6, 8][rng.gen_range(0..4)];
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let c = heads * rng.gen_range(1..=16 / heads);
    let n = side * side;
    let cfg = ModelConfig {
        window: side,
        package_len: n,
        ..ModelConfig::micro()
    };
    let shifted = rng.gen_bool(0.5);
    let g = Graph::<f32>::new();
    let p = random_block(&g, c, heads, None, rng)?;
    let gate = GateParams {
        weight: g.leaf(random_tensor(&[c, 1], rng)),
        bias: g.leaf(Tensor::full(&[1], 8.0)),
    };
    let x: Tensor<f32> = random_tensor(&[1, side, side, c], rng);
    let grid = TokenGrid::new(g.leaf(x.clone()))?;
    let out = spa_block(&grid, None, &p, &gate, &cfg, shifted, Mode::Eval, rng)?;
    if out.keep.count() != n || out.containers != 1 {
        return Err(SptError::Usage(format!(
            "equivalence case selected {} of {n} tokens in {} containers",
            out.keep.count(),
            out.containers
        )));
    }
    let gated: Vec<f64> = {
        let s = out.scores.logits.value().to_f64_vec();
        x.to_f64_vec()
            .chunks(c)
            .zip(&s)
            .flat_map(|(row, &s)| {
                let sig = 1.0 / (1.0 + (-s).exp());
                row.iter().map(move |v| v * sig).collect::<Vec<_>>()
            })
            .collect()
    };
    let want = dense_block_reference(&gated, 1, n, &BlockWeights::from_params(&p));
    let got = out.grid.values.value().to_f64_vec();
    Ok(max_relative_diff(&got, &want))
}

pub fn equivalence_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xe9);
    let mut worst = 0f64;
    for _ in 0..opts.equivalence_configs {
        worst = worst.max(equivalence_case(&mut rng)?);
    }
    Ok(vec![Check::new(
        Suite::Equivalence,
        format!("spa_full_selection_vs_dense_{}_configs", opts.equivalence_configs),
        format!("<= {EQUIVALENCE_TOLERANCE:e}"),
        format!("{worst:e}"),
        worst <= EQUIVALENCE_TOLERANCE,
    )])
}

// ---------------------------------------------------------------------------
// cost

/// The attention cost formulas term by term, as a reader would substitute
/// them by hand.
fn hand_substituted(b: u64, n: u64, c: u64, m: u64, l: u64, bp: u64) -> (u128, u128, u128) {
    let (b, n, c, m, l, bp) = (b as u128, n as u128, c as u128, m as u128, l as u128, bp as u128);
    let proj = 4 * n * c * c;
    let msa = b * proj + b * 2 * (n * n) * c;
    let wmsa = b * proj + b * 2 * (m * m) * n * c;
    let spa = b * n * c + b * n * c * c + bp * 3 * l * c * c + bp * 2 * (l * l) * c;
    (msa, wmsa, spa)
}

fn cost_grid() -> Vec<(u64, u64, u64, u64, u64)> {
    let mut grid = Vec::new();
    let bs = [1u64, 2, 8, 32];
    let shapes = [(16u64, 4u64, 2u64), (64, 8, 4), (256, 96, 4), (1024, 48, 8), (3136, 96, 7)];
    for (i, &b) in bs.iter().enumerate() {
        for (j, &(n, c, m)) in shapes.iter().enumerate() {
            let l = m * m;
            let bp = (b * n).div_ceil(l) * ((i + j) as u64 % 4 + 1) / 4;
            grid.push((b, n, c, m, bp));
        }
    }
    grid
}

/// Cost-model parity followed by the padding-waste sweep.
pub fn cost_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = cost_model_checks(opts)?;
    checks.extend(padding_waste_checks(6, 4));
    Ok(checks)
}

/// Formula parity on a fixed grid, instrumented MAC parity of dense, window
/// and SPA blocks, and SPA against W-MSA at a quarter select ratio.
pub fn cost_model_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let suite = Suite::Cost;
    let mut checks = Vec::new();

    let grid = cost_grid();
    let mut mismatches = 0;
    for &(b, n, c, m, bp) in &grid {
        let (msa, wmsa, spa) = hand_substituted(b, n, c, m, m * m, bp);
        mismatches += usize::from(u128::from(flops_msa(b, n, c)) != msa);
        mismatches += usize::from(u128::from(flops_wmsa(b, n, c, m)) != wmsa);
        mismatches += usize::from(u128::from(flops_spa(b, n, c, m * m, bp)) != spa);
    }
    let literal = [
        flops_msa(1, 16, 4) == 3072,
        flops_wmsa(1, 16, 4, 2) == 1536,
        flops_spa(2, 64, 8, 16, 2) == 23552,
    ];
    mismatches += literal.iter().filter(|ok| !**ok).count();
    checks.push(Check::new(
        suite,
        format!("formulas_exact_on_{}_point_grid", grid.len()),
        "integer equality",
        format!("{mismatches} mismatches"),
        mismatches == 0,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xc05);
    // Instrumented dense block: attention MACs against B(4NC² + 2N²C).
    {
        let (b, side, c, heads) = (2usize, 4usize, 8usize, 2usize);
        let n = side * side;
        let g = Graph::<f32>::new();
        let p = random_block(&g, c, heads, None, &mut rng)?;
        let z = g.leaf(random_tensor(&[b, n, c], &mut rng));
        let (_, counts) = macs::measure(|| multi_head_attention(z, &p, None, None, 1));
        let want = flops_msa(b as u64, n as u64, c as u64);
        checks.push(Check::new(
            suite,
            "dense_block_macs_match_msa",
            format!("== {want}"),
            counts.attention.to_string(),
            counts.attention == want,
        ));

        let pw = random_block(&g, c, heads, Some(2), &mut rng)?;
        let x = TokenGrid::new(g.leaf(random_tensor(&[b, side, side, c], &mut rng)))?;
        let (_, counts) = macs::measure(|| window_attention_block(&x, &pw, true, 2));
        let want = flops_wmsa(b as u64, n as u64, c as u64, 2);
        checks.push(Check::new(
            suite,
            "window_block_macs_match_wmsa",
            format!("== {want}"),
            counts.attention.to_string(),
            counts.attention == want,
        ));

        let cfg = ModelConfig {
            package_len: 4,
            tau: 0.5,
            ..ModelConfig::micro()
        };
        let gate = GateParams {
            weight: g.leaf(random_tensor(&[c, 1], &mut rng)),
            bias: g.leaf(Tensor::zeros(&[1])),
        };
        let (out, counts) = macs::measure(|| spa_block(&x, None, &p, &gate, &cfg, false, Mode::Train, &mut rng));
        let out = out?;
        let want = flops_spa(b as u64, n as u64, c as u64, 4, out.containers as u64);
        checks.push(Check::new(
            suite,
            "spa_block_macs_match_spa",
            format!("== {want}"),
            counts.attention.to_string(),
            counts.attention == want,
        ));
    }

    // Default configuration at a 25% select ratio, analytically for every
    // SPA stage and instrumented for one block of the first SPA stage.
    {
        let cfg = ModelConfig::default();
        let mut worst = 0f64;
        for stage in cfg.spa_start_stage..=4 {
            let (h, w) = cfg.stage_grid(stage);
            let r = cost::CostReport::from_ratio(1, (h * w) as u64, cfg.stage_dim(stage) as u64, cfg.window as u64, 0.25);
            worst = worst.max(r.omega_spa as f64 / r.omega_wmsa as f64);
        }
        checks.push(Check::new(
            suite,
            "default_config_spa_below_wmsa_at_quarter",
            "omega_spa / omega_wmsa < 1",
            format!("{worst:.4}"),
            worst < 1.0,
        ));

        let stage = cfg.spa_start_stage;
        let (h, w) = cfg.stage_grid(stage);
        let (c, heads) = (cfg.stage_dim(stage), cfg.heads[stage - 1]);
        let quarter = ModelConfig {
            selection: SelectionPolicy::TopFraction(0.25),
            ..cfg.clone()
        };
        let g = Graph::<f32>::new();
        let x = TokenGrid::new(g.leaf(random_tensor(&[1, h, w, c], &mut rng)))?;
        let pw = random_block(&g, c, heads, Some(cfg.window), &mut rng)?;
        let ps = random_block(&g, c, heads, None, &mut rng)?;
        let gate = GateParams {
            weight: g.leaf(random_tensor(&[c, 1], &mut rng)),
            bias: g.leaf(Tensor::zeros(&[1])),
        };
        let (_, win) = macs::measure(|| window_attention_block(&x, &pw, false, cfg.window));
        let (spa, sp) = macs::measure(|| spa_block(&x, None, &ps, &gate, &quarter, false, Mode::Eval, &mut rng));
        let ratio = spa?.keep.ratio();
        checks.push(Check::new(
            suite,
            "default_stage_measured_spa_below_window",
            format!("spa < window at ratio {ratio}"),
            format!("{} vs {}", sp.attention, win.attention),
            sp.attention < win.attention,
        ));
    }

    Ok(checks)
}

/// Exhaustive sweep over count vectors of up to `max_batch` images with
/// counts in `0..=3L`, for every `L` in `1..=max_len`.
pub fn padding_waste_checks(max_batch: usize, max_len: usize) -> Vec<Check> {
    let suite = Suite::Cost;
    let (mut vectors, mut spa_bad, mut maxpad_bad) = (0u64, 0u64, 0u64);
    let mut first_counterexample: Option<(Vec<usize>, usize, usize, usize)> = None;
    for len in 1..=max_len {
        let top = 3 * len;
        for b in 1..=max_batch {
            let mut counts = vec![0usize; b];
            loop {
                vectors += 1;
                let (spa, maxpad) = padding_waste(&counts, len);
                spa_bad += u64::from(spa >= len);
                let max = counts.iter().copied().max().unwrap_or(0);
                if max >= len && maxpad < spa {
                    maxpad_bad += 1;
                    first_counterexample.get_or_insert((counts.clone(), len, spa, maxpad));
                }
                // Odometer increment.
                let mut i = 0;
                while i < b && counts[i] == top {
                    counts[i] = 0;
                    i += 1;
                }
                if i == b {
                    break;
                }
                counts[i] += 1;
            }
        }
    }
    let maxpad_observed = match &first_counterexample {
        Some((counts, len, spa, maxpad)) => format!(
            "{maxpad_bad} of {vectors} vectors, e.g. counts {counts:?} L={len}: spa {spa}, maxpad {maxpad}"
        ),
        None => format!("0 of {vectors} vectors"),
    };
    vec![
        Check::new(
            suite,
            "spa_waste_below_len",
            "0 violations",
            format!("{spa_bad} of {vectors} vectors"),
            spa_bad == 0,
        ),
        Check::new(
            suite,
            "maxpad_waste_at_least_spa_when_max_reaches_len",
            "0 violations",
            maxpad_observed,
            maxpad_bad == 0,
        ),
    ]
}
