//! Acceptance criteria, one test each. Every test writes a single
//! `PASS`/`FAIL` line to stdout (uncaptured) and then asserts.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spt_core::harness::data::{gen_sparse_dataset, Density, SparseSample};
use spt_core::harness::train::{evaluate, train, EvalMetrics};
use spt_core::model::SptModel;
use spt_core::verify::{self, Check, VerifyOptions};
use spt_core::{Graph, Mode, ModelConfig, Tensor, TrainConfig, NO_SPA};

fn report(criterion: u32, passed: bool, detail: &str, elapsed: Duration, budget: Duration) {
    let line = format!(
        "{} criterion {criterion}: {detail} [{:.1}s of {:.0}s budget]\n",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    let _ = std::io::stdout().write_all(line.as_bytes());
}

fn suite_criterion(criterion: u32, checks: &[Check], elapsed: Duration, budget: Duration) {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let summary: Vec<String> = checks.iter().map(|c| format!("{}={}", c.name, c.observed)).collect();
    let passed = failed.is_empty() && elapsed < budget;
    report(criterion, passed, &summary.join("; "), elapsed, budget);
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(elapsed < budget, "took {elapsed:?}");
}

#[test]
fn criterion_1_packing_suite() {
    let t = Instant::now();
    let checks = verify::packing_suite(&VerifyOptions::default()).unwrap();
    suite_criterion(1, &checks, t.elapsed(), Duration::from_secs(10));
}

#[test]
fn criterion_2_dense_equivalence() {
    let t = Instant::now();
    let checks = verify::equivalence_suite(&VerifyOptions::default()).unwrap();
    suite_criterion(2, &checks, t.elapsed(), Duration::from_secs(30));
}

#[test]
fn criterion_3_gradient_suite() {
    let t = Instant::now();
    let checks = verify::gradient_suite(&VerifyOptions::default()).unwrap();
    suite_criterion(3, &checks, t.elapsed(), Duration::from_secs(120));
}

#[test]
fn criterion_4_cost_model_parity() {
    let t = Instant::now();
    let checks = verify::cost_model_checks(&VerifyOptions::default()).unwrap();
    suite_criterion(4, &checks, t.elapsed(), Duration::from_secs(5));
}

#[test]
fn criterion_5_padding_waste() {
    let t = Instant::now();
    let checks = verify::padding_waste_checks(6, 4);
    suite_criterion(5, &checks, t.elapsed(), Duration::from_secs(5));
}

// ---------------------------------------------------------------------------
// training-based criteria

const SEEDS: [u64; 3] = [0, 1, 2];
const CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Variant {
    Supervised,
    Unsupervised,
    Dense,
}

#[derive(Clone)]
struct Run {
    eval: EvalMetrics,
    elapsed: Duration,
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    }
}

fn data(seed: u64) -> (Vec<SparseSample>, Vec<SparseSample>) {
    let train = gen_sparse_dataset(200, CLASSES, 64, 64, Density::CornerQuarter, 100 + seed).unwrap();
    let test = gen_sparse_dataset(200, CLASSES, 64, 64, Density::CornerQuarter, 900 + seed).unwrap();
    (train, test)
}

/// Trains each `(seed, variant)` once per process; later criteria reuse it.
fn run(seed: u64, variant: Variant) -> Run {
    static CACHE: OnceLock<Mutex<HashMap<(u64, Variant), Run>>> = OnceLock::new();
    let mut cache = CACHE.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    if let Some(r) = cache.get(&(seed, variant)) {
        return r.clone();
    }
    let t = Instant::now();
    let (train_set, test_set) = data(seed);
    let cfg = ModelConfig {
        num_classes: CLASSES,
        seed,
        alpha: if variant == Variant::Supervised { 0.01 } else { 0.0 },
        spa_start_stage: if variant == Variant::Dense { NO_SPA } else { 3 },
        ..ModelConfig::micro()
    };
    let tc = train_config();
    let mut model = SptModel::new(cfg).unwrap();
    train(&mut model, &train_set, &tc, |_| {}).unwrap();
    let eval = evaluate(&model, &test_set, tc.batch_size).unwrap();
    let r = Run {
        eval,
        elapsed: t.elapsed(),
    };
    cache.insert((seed, variant), r.clone());
    r
}

#[test]
fn criterion_6_selection_supervision() {
    let budget = Duration::from_secs(15 * 60);
    let mut cpu = Duration::ZERO;
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let sup = run(seed, Variant::Supervised);
        let unsup = run(seed, Variant::Unsupervised);
        cpu += sup.elapsed + unsup.elapsed;
        let (a, b) = (sup.eval.ratio_mean, unsup.eval.ratio_mean);
        let good = (0.15..=0.35).contains(&a) && a < b;
        ok += usize::from(good);
        parts.push(format!("seed {seed}: alpha=0.01 ratio {a:.4}, alpha=0 ratio {b:.4}"));
    }
    let passed = ok == SEEDS.len() && cpu < budget;
    report(
        6,
        passed,
        &format!("{} of {} seeds hold; {}", ok, SEEDS.len(), parts.join("; ")),
        cpu,
        budget,
    );
    assert_eq!(ok, SEEDS.len(), "{parts:#?}");
    assert!(cpu < budget);
}

#[test]
fn criterion_7_end_to_end_micro() {
    let budget = Duration::from_secs(30 * 60);
    let mut cpu = Duration::ZERO;
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let spt = run(seed, Variant::Supervised);
        let dense = run(seed, Variant::Dense);
        cpu += spt.elapsed + dense.elapsed;
        let (sa, da) = (spt.eval.accuracy, dense.eval.accuracy);
        let (sm, dm) = (spt.eval.attention_macs_per_image(), dense.eval.attention_macs_per_image());
        let saving = 1.0 - sm / dm;
        let good = sa >= da - 0.01 && saving >= 0.25;
        ok += usize::from(good);
        parts.push(format!(
            "seed {seed}: accuracy {sa:.3} vs dense {da:.3}, attention MACs/image {sm:.0} vs {dm:.0} ({:.1}% fewer)",
            100.0 * saving
        ));
    }
    let passed = ok == SEEDS.len() && cpu < budget;
    report(
        7,
        passed,
        &format!("{} of {} seeds hold; {}", ok, SEEDS.len(), parts.join("; ")),
        cpu,
        budget,
    );
    assert_eq!(ok, SEEDS.len(), "{parts:#?}");
    assert!(cpu < budget);
}

#[test]
fn criterion_8_shape_chain() {
    let budget = Duration::from_secs(1);
    let t = Instant::now();
    let micro = ModelConfig::micro();
    let configs = [
        (1, micro.clone()),
        (
            2,
            ModelConfig {
                width: 128,
                embed_dim: 8,
                heads: [1, 1, 2, 2],
                ..micro.clone()
            },
        ),
        (
            1,
            ModelConfig {
                height: 128,
                width: 128,
                embed_dim: 12,
                window: 4,
                package_len: 16,
                heads: [1, 2, 3, 4],
                ..micro.clone()
            },
        ),
        (
            3,
            ModelConfig {
                spa_start_stage: 2,
                depths: [2, 4, 2, 2],
                ..micro.clone()
            },
        ),
        (1, ModelConfig::default()),
    ];
    let mut bad = Vec::new();
    for (b, cfg) in &configs {
        let b = *b;
        let model = SptModel::<f32>::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = b * cfg.height * cfg.width * 3;
        let x = Tensor::new(&[b, cfg.height, cfg.width, 3], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let g = Graph::new();
        let out = model.forward(&g, &x, Mode::Eval, &mut rng).unwrap();
        let (h, w, c) = (cfg.height, cfg.width, cfg.embed_dim);
        let want_r: Vec<Vec<usize>> = (0..4).map(|i| vec![b, h / (4 << i), w / (4 << i), c << i]).collect();
        let got_r: Vec<Vec<usize>> = out.features.iter().map(|f| f.values.shape()).collect();
        let want_s: Vec<Vec<usize>> = (0..3).map(|i| vec![b, h / (8 << i), w / (8 << i), 1]).collect();
        let got_s: Vec<Vec<usize>> = out.stage_scores.iter().map(|s| s.logits.shape()).collect();
        if got_r != want_r || got_s != want_s {
            bad.push(format!("{h}x{w} C={c}: r {got_r:?} s {got_s:?}"));
        }
    }
    let elapsed = t.elapsed();
    let passed = bad.is_empty() && elapsed < budget;
    report(
        8,
        passed,
        &format!("{} of {} configs match r1..r4 and s0..s2", configs.len() - bad.len(), configs.len()),
        elapsed,
        budget,
    );
    assert!(bad.is_empty(), "{bad:#?}");
    assert!(elapsed < budget, "took {elapsed:?}");
}
