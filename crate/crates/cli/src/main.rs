mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spt_core::cost::{CostReport, COST_CSV_HEADER};
use spt_core::harness::ablation::{ablation_runs, ABLATION_CSV_HEADER};
use spt_core::harness::data::{gen_sparse_dataset, load_dataset, save_dataset, Density, SparseSample};
use spt_core::harness::train::{train, train_csv_header};
use spt_core::model::SptModel;
use spt_core::verify::{parse_suites, run_suite, Fault, VerifyOptions};
use spt_core::{Result, RunConfig, SptError};

use manifest::{dataset_files, hash_files, io, manifest_for, RunManifest, MANIFEST_NAME};

#[derive(Parser)]
#[command(name = "spt", version, about = "Select-and-pack sparse attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sparse classification dataset.
    Gen(GenArgs),
    /// Train a model and write per-epoch metrics as CSV.
    Train(TrainArgs),
    /// Train every ablation variant and write one CSV row per variant.
    Ablate(AblateArgs),
    /// Print analytic attention costs for one or more select ratios.
    Cost(CostArgs),
    /// Run verification suites; exits 1 if any check fails.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value = "corner-quarter")]
    mode: Density,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// `key=value` config file; unset keys take the micro defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also save the trained parameters here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset; defaults to the training data.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long = "B")]
    b: u64,
    #[arg(long = "N")]
    n: u64,
    #[arg(long = "C")]
    c: u64,
    #[arg(long = "M")]
    m: u64,
    /// One ratio or a comma-separated sweep.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    ratio: Vec<f64>,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// packing, gradients, equivalence, cost or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the system under test to show a check catching it.
    #[arg(long, value_name = "FAULT")]
    inject_fault: Option<Fault>,
}

enum Failure {
    Checks(usize),
    Error(SptError),
}

impl From<SptError> for Failure {
    fn from(e: SptError) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let command = format!("spt {}", argv.join(" "));
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(&a, &command).map_err(Failure::from),
        Command::Train(a) => cmd_train(&a, &command).map_err(Failure::from),
        Command::Ablate(a) => cmd_ablate(&a, &command).map_err(Failure::from),
        Command::Cost(a) => cmd_cost(&a, &command).map_err(Failure::from),
        Command::Verify(a) => cmd_verify(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks(n)) => {
            eprintln!("{n} check(s) failed");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &SptError) -> u8 {
    match e {
        SptError::Usage(_) | SptError::Config { .. } | SptError::Format { .. } | SptError::Annotation(_) | SptError::Io { .. } => 2,
        _ => 1,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SPT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| SptError::Usage(format!("SPT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| SptError::Usage(format!("cannot size the thread pool: {e}")))
}

fn cmd_gen(a: &GenArgs, command: &str) -> Result<()> {
    if a.n == 0 || a.classes == 0 {
        return Err(SptError::Usage("--n and --classes must be positive".into()));
    }
    let samples = gen_sparse_dataset(a.n, a.classes, a.height, a.width, a.mode, a.seed)?;
    save_dataset(&a.out, &samples)?;
    let files = dataset_files(&a.out)?;
    let config = format!(
        "n={}\nclasses={}\nmode={}\nheight={}\nwidth={}\n",
        a.n, a.classes, a.mode, a.height, a.width
    );
    RunManifest {
        command: command.into(),
        seed: a.seed,
        config,
        inputs_hash: hash_files(&files)?,
        outputs: vec![a.out.clone()],
    }
    .write(&a.out.join(MANIFEST_NAME))
}

fn load_config(path: Option<&Path>, epochs: Option<usize>, seed: Option<u64>) -> Result<RunConfig> {
    let mut rc = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    if let Some(e) = epochs {
        rc.train.epochs = e;
    }
    if let Some(s) = seed {
        rc.model.seed = s;
    }
    Ok(rc)
}

/// Loads a dataset and checks it against the model config.
fn load_checked(dir: &Path, rc: &RunConfig) -> Result<Vec<SparseSample>> {
    let data = load_dataset(dir)?;
    if data.is_empty() {
        return Err(SptError::Usage(format!("{} holds no samples", dir.display())));
    }
    let m = &rc.model;
    for s in &data {
        let shape = s.image.shape();
        if shape[0] != m.height || shape[1] != m.width {
            return Err(SptError::Config {
                field: "height/width".into(),
                constraint: format!(
                    "dataset images are {}x{} but the config expects {}x{}",
                    shape[0], shape[1], m.height, m.width
                ),
            });
        }
        if s.class_id >= m.num_classes {
            return Err(SptError::Config {
                field: "num_classes".into(),
                constraint: format!("dataset has class {} but num_classes = {}", s.class_id, m.num_classes),
            });
        }
    }
    Ok(data)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io(path, e))
}

fn write_line(w: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| io(path, e))
}

fn cmd_train(a: &TrainArgs, command: &str) -> Result<()> {
    let rc = load_config(a.config.as_deref(), a.epochs, a.seed)?;
    let data = load_checked(&a.data, &rc)?;
    let mut model = SptModel::<f32>::new(rc.model.clone())?;

    let mut out = create(&a.out)?;
    write_line(&mut out, &a.out, &train_csv_header(rc.model.spa_blocks()))?;
    let mut write_err = None;
    train(&mut model, &data, &rc.train, |m| {
        if write_err.is_none() {
            write_err = write_line(&mut out, &a.out, &m.csv_row()).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }

    let mut outputs = vec![a.out.clone()];
    if let Some(ck) = &a.checkpoint {
        model.save_checkpoint(ck)?;
        outputs.push(ck.clone());
    }
    RunManifest {
        command: command.into(),
        seed: rc.model.seed,
        config: rc.to_text(),
        inputs_hash: hash_files(&dataset_files(&a.data)?)?,
        outputs,
    }
    .write(&manifest_for(&a.out))
}

fn cmd_ablate(a: &AblateArgs, command: &str) -> Result<()> {
    let rc = load_config(a.config.as_deref(), a.epochs, a.seed)?;
    let train_set = load_checked(&a.data, &rc)?;
    let test_dir = a.test.as_ref().unwrap_or(&a.data);
    let test_set = if a.test.is_some() {
        load_checked(test_dir, &rc)?
    } else {
        train_set.clone()
    };

    let mut out = create(&a.out)?;
    write_line(&mut out, &a.out, ABLATION_CSV_HEADER)?;
    let mut write_err = None;
    ablation_runs(&rc.model, &rc.train, &train_set, &test_set, |row| {
        if write_err.is_none() {
            write_err = write_line(&mut out, &a.out, &row.csv_row()).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }

    let mut inputs = dataset_files(&a.data)?;
    if a.test.is_some() {
        inputs.extend(dataset_files(test_dir)?);
    }
    RunManifest {
        command: command.into(),
        seed: rc.model.seed,
        config: rc.to_text(),
        inputs_hash: hash_files(&inputs)?,
        outputs: vec![a.out.clone()],
    }
    .write(&manifest_for(&a.out))
}

fn cmd_cost(a: &CostArgs, command: &str) -> Result<()> {
    if a.b == 0 || a.n == 0 || a.c == 0 || a.m == 0 {
        return Err(SptError::Usage("--B, --N, --C and --M must be positive".into()));
    }
    if let Some(r) = a.ratio.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(SptError::Usage(format!("--ratio {r} is outside [0, 1]")));
    }
    let mut csv = format!("{COST_CSV_HEADER}\n");
    for &r in &a.ratio {
        csv.push_str(&CostReport::from_ratio(a.b, a.n, a.c, a.m, r).csv_row());
        csv.push('\n');
    }
    match &a.out {
        None => {
            print!("{csv}");
            Ok(())
        }
        Some(path) => {
            create(path)?.write_all(csv.as_bytes()).map_err(|e| io(path, e))?;
            let ratios: Vec<String> = a.ratio.iter().map(|r| r.to_string()).collect();
            RunManifest {
                command: command.into(),
                seed: 0,
                config: format!("B={}\nN={}\nC={}\nM={}\nratio={}\n", a.b, a.n, a.c, a.m, ratios.join(",")),
                inputs_hash: hash_files(&[])?,
                outputs: vec![path.clone()],
            }
            .write(&manifest_for(path))
        }
    }
}

fn cmd_verify(a: &VerifyArgs) -> std::result::Result<(), Failure> {
    let suites = parse_suites(&a.suite)?;
    let opts = VerifyOptions {
        seed: a.seed,
        fault: a.inject_fault,
        ..VerifyOptions::default()
    };
    let mut total = 0;
    let mut failed = 0;
    for suite in suites {
        for check in run_suite(suite, &opts)? {
            println!("{check}");
            total += 1;
            failed += usize::from(!check.passed);
        }
    }
    println!("{} of {total} checks passed", total - failed);
    if failed > 0 {
        Err(Failure::Checks(failed))
    } else {
        Ok(())
    }
}
