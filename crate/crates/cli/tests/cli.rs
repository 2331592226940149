use std::path::Path;
use std::process::{Command, Output};

use spt_core::harness::data::load_dataset;

fn spt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spt"))
        .args(args)
        .env_remove("SPT_THREADS")
        .output()
        .expect("spawn spt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, n: usize, classes: usize, seed: u64) {
    let o = spt(&[
        "gen",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        &n.to_string(),
        "--classes",
        &classes.to_string(),
        "--mode",
        "corner-quarter",
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn manifest_hash(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("manifest.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix("inputs_sha256: "))
        .unwrap()
        .to_string()
}

#[test]
fn gen_writes_samples_and_index() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    gen(&dir, 8, 2, 1);
    let index = std::fs::read_to_string(dir.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 9);
    let images = std::fs::read_dir(&dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "spt"))
        .count();
    assert_eq!(images, 8);
}

#[test]
fn gen_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    gen(&a, 4, 2, 7);
    gen(&b, 4, 2, 7);
    gen(&c, 4, 2, 8);
    assert_eq!(manifest_hash(&a), manifest_hash(&b));
    assert_ne!(manifest_hash(&a), manifest_hash(&c));
}

#[test]
fn corner_quarter_labels_a_quarter_of_level0() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 6, 3, 2);
    for s in load_dataset(tmp.path()).unwrap() {
        let l0 = &s.pyramid.levels[0];
        assert_eq!(4 * l0.positives(), l0.cells.len());
    }
}

#[test]
fn train_zero_epochs_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 4, 2, 0);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "num_classes=2\n").unwrap();
    let out = tmp.path().join("m.csv");
    let o = spt(&[
        "train",
        "--data",
        tmp.path().to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        csv,
        "epoch,l_task,l_select,l_total,top1,ratio_block_1,ratio_block_2,ratio_block_3,ratio_block_4,ratio_block_5,ratio_block_6,ratio_mean,macs\n"
    );
    assert!(tmp.path().join("m.csv.manifest").exists());
}

#[test]
fn train_csv_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 8, 2, 3);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "num_classes=2\nbatch_size=4\n").unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = spt(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--epochs",
            "2",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 3);
    for row in text.lines().skip(1) {
        assert_eq!(row.split(',').count(), 13);
    }
}

#[test]
fn config_mismatch_fails_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 4, 3, 0);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "num_classes=2\n").unwrap();
    let out = tmp.path().join("m.csv");
    let o = spt(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_classes"));
    assert!(!out.exists());

    std::fs::write(&cfg, "num_classes=3\nwindow=3\n").unwrap();
    let o = spt(&["train", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cost_matches_hand_values() {
    let o = spt(&["cost", "--B", "1", "--N", "16", "--C", "4", "--M", "2", "--ratio", "1.0"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("omega_msa"), "3072");
    assert_eq!(col("omega_wmsa"), "1536");

    let o = spt(&["cost", "--B", "1", "--N", "16", "--C", "4", "--M", "2", "--ratio", "0"]);
    let text = stdout(&o);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[header.iter().position(|h| *h == "omega_spa").unwrap()], "320");
}

#[test]
fn cost_ratio_sweep_is_monotone() {
    let ratios: Vec<String> = (1..=20).map(|i| format!("{}", i as f64 * 0.05)).collect();
    let o = spt(&["cost", "--B", "4", "--N", "64", "--C", "8", "--M", "4", "--ratio", &ratios.join(",")]);
    assert!(o.status.success());
    let text = stdout(&o);
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == "omega_spa").unwrap();
    let spa: Vec<u64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(idx).unwrap().parse().unwrap())
        .collect();
    assert_eq!(spa.len(), 20);
    assert!(spa.windows(2).all(|w| w[0] <= w[1]), "{spa:?}");
}

#[test]
fn cost_out_file_gets_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c.csv");
    let o = spt(&["cost", "--B", "2", "--N", "16", "--C", "4", "--M", "2", "--ratio", "0.25,0.5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);
    let m = std::fs::read_to_string(tmp.path().join("c.csv.manifest")).unwrap();
    assert!(m.contains("ratio=0.25,0.5"));
}

#[test]
fn verify_packing_passes() {
    let o = spt(&["verify", "--suite", "packing"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS packing/")).count() >= 5);
    assert!(!text.contains("FAIL"));
    assert!(text.contains("tolerance:") && text.contains("observed:"));
}

#[test]
fn injected_mask_fault_is_caught() {
    let o = spt(&["verify", "--suite", "packing", "--inject-fault", "mask-bit"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failed.len(), 1, "{text}");
    assert!(failed[0].contains("cross_image_isolation_bit_exact"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(spt(&["cost", "--B", "1", "--N", "16", "--C", "4", "--M", "2", "--ratio", "1", "--bogus"]).status.code(), Some(2));
    assert_eq!(spt(&["verify", "--suite", "nope"]).status.code(), Some(2));
    assert_eq!(spt(&["verify", "--inject-fault", "nope"]).status.code(), Some(2));
    assert_eq!(spt(&["cost", "--B", "0", "--N", "16", "--C", "4", "--M", "2", "--ratio", "1"]).status.code(), Some(2));
    assert_eq!(spt(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn spt_threads_is_validated() {
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_spt"))
            .args(["cost", "--B", "1", "--N", "16", "--C", "4", "--M", "2", "--ratio", "1"])
            .env("SPT_THREADS", v)
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(run("1"), Some(0));
    assert_eq!(run("0"), Some(2));
    assert_eq!(run("many"), Some(2));
}
