//! Model and run configuration, plus the flat `key=value` config file.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SptError};

/// How SPA blocks choose their positive tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionPolicy {
    /// Binary Gumbel-Softmax over the fused score, thresholded at `tau`.
    Gumbel,
    /// Keep the top `fraction` of tokens of every image by score, the
    /// uniform-ratio baseline.
    TopFraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Stage-1 embedding dimension; stage `i` uses `embed_dim · 2^(i-1)`.
    pub embed_dim: usize,
    /// Window side in tokens.
    pub window: usize,
    /// Package container length in tokens; always `window²`.
    pub package_len: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    /// Select-loss weight.
    pub alpha: f64,
    /// Keep-probability threshold of the Gumbel selection.
    pub tau: f64,
    /// Gumbel-Softmax temperature.
    pub temp: f64,
    pub seed: u64,
    /// First stage built from SPA blocks (2, 3 or 4). `5` builds no SPA
    /// block at all: the dense windowed baseline.
    pub spa_start_stage: usize,
    pub num_classes: usize,
    pub selection: SelectionPolicy,
}

/// Disables SPA blocks when used as `spa_start_stage`.
pub const NO_SPA: usize = 5;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 256,
            width: 256,
            embed_dim: 24,
            window: 4,
            package_len: 16,
            depths: [2, 2, 4, 2],
            heads: [2, 4, 8, 16],
            alpha: 0.01,
            tau: 0.01,
            temp: 1.0,
            seed: 0,
            spa_start_stage: 3,
            num_classes: 4,
            selection: SelectionPolicy::Gumbel,
        }
    }
}

impl ModelConfig {
    /// Smallest useful shape: 64×64 inputs, 2×2 windows, 4-token packages.
    pub fn micro() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            embed_dim: 16,
            window: 2,
            package_len: 4,
            depths: [2, 2, 4, 2],
            heads: [1, 2, 4, 8],
            ..ModelConfig::default()
        }
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << (stage - 1)
    }

    /// Spatial grid `(h, w)` of stage `stage` (1-based).
    pub fn stage_grid(&self, stage: usize) -> (usize, usize) {
        let f = 2usize << stage;
        (self.height / f, self.width / f)
    }

    pub fn is_spa_stage(&self, stage: usize) -> bool {
        stage >= self.spa_start_stage
    }

    /// Number of blocks that run sparse attention.
    pub fn spa_blocks(&self) -> usize {
        (1..=4).filter(|&s| self.is_spa_stage(s)).map(|s| self.depths[s - 1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, constraint: String| {
            Err(SptError::Config {
                field: field.into(),
                constraint,
            })
        };
        if self.window == 0 {
            return err("window", "M must be at least 1".into());
        }
        if self.package_len != self.window * self.window {
            return err(
                "package_len",
                format!("L must equal M² (M = {}, L = {})", self.window, self.package_len),
            );
        }
        for (field, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 32 != 0 {
                return err(field, format!("must be a positive multiple of 32, got {v}"));
            }
            let last = v / 32;
            if last < self.window || last % self.window != 0 {
                return err(
                    field,
                    format!("{field}/32 = {last} must be >= M and divisible by M = {}", self.window),
                );
            }
        }
        if self.embed_dim == 0 {
            return err("embed_dim", "C must be at least 1".into());
        }
        for (i, &d) in self.depths.iter().enumerate() {
            if d == 0 || d % 2 != 0 {
                return err("depths", format!("stage depth must be even and positive (stage {} has {d})", i + 1));
            }
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let dim = self.stage_dim(i + 1);
            if h == 0 || !dim.is_multiple_of(h) {
                return err("heads", format!("stage {} heads {h} must divide channels {dim}", i + 1));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return err("alpha", format!("must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return err("tau", format!("must lie in (0, 1), got {}", self.tau));
        }
        if !(self.temp > 0.0 && self.temp.is_finite()) {
            return err("temp", format!("must be > 0, got {}", self.temp));
        }
        if !(2..=NO_SPA).contains(&self.spa_start_stage) {
            return err(
                "spa_start_stage",
                format!("must be 2, 3, 4 or {NO_SPA} (none), got {}", self.spa_start_stage),
            );
        }
        if self.num_classes == 0 {
            return err("num_classes", "need at least one class".into());
        }
        if let SelectionPolicy::TopFraction(f) = self.selection {
            if !(f > 0.0 && f <= 1.0) {
                return err("selection", format!("top fraction must lie in (0, 1], got {f}"));
            }
        }
        Ok(())
    }
}

/// Optimizer and schedule settings for a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            epochs: 10,
            clip_norm: 1.0,
        }
    }
}

/// Everything a config file can set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| SptError::Config {
            field: key.into(),
            constraint: format!("expected {N} comma-separated integers: {e}"),
        })?;
    parts.try_into().map_err(|p: Vec<usize>| SptError::Config {
        field: key.into(),
        constraint: format!("expected {N} values, got {}", p.len()),
    })
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N>
where
    N::Err: std::fmt::Display,
{
    v.parse().map_err(|e: N::Err| SptError::Config {
        field: key.into(),
        constraint: format!("cannot parse {v:?}: {e}"),
    })
}

impl RunConfig {
    /// Parses `key=value` lines. Blank lines and `#` comments are skipped;
    /// unknown keys are an error. Unset keys keep the micro defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig {
            model: ModelConfig::micro(),
            train: TrainConfig::default(),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SptError::Format {
                what: "config",
                detail: format!("line {}: expected key=value, got {line:?}", lineno + 1),
            })?;
            let (key, v) = (key.trim(), value.trim());
            let m = &mut cfg.model;
            match key {
                "height" => m.height = parse_num(key, v)?,
                "width" => m.width = parse_num(key, v)?,
                "embed_dim" => m.embed_dim = parse_num(key, v)?,
                "window" => m.window = parse_num(key, v)?,
                "package_len" => m.package_len = parse_num(key, v)?,
                "depths" => m.depths = parse_list(key, v)?,
                "heads" => m.heads = parse_list(key, v)?,
                "alpha" => m.alpha = parse_num(key, v)?,
                "tau" => m.tau = parse_num(key, v)?,
                "temp" => m.temp = parse_num(key, v)?,
                "seed" => m.seed = parse_num(key, v)?,
                "spa_start_stage" => {
                    m.spa_start_stage = if v == "none" { NO_SPA } else { parse_num(key, v)? }
                }
                "num_classes" => m.num_classes = parse_num(key, v)?,
                "selection" => {
                    m.selection = match v.split_once(':') {
                        None if v == "gumbel" => SelectionPolicy::Gumbel,
                        Some(("top", f)) => SelectionPolicy::TopFraction(parse_num(key, f)?),
                        _ => {
                            return Err(SptError::Config {
                                field: key.into(),
                                constraint: format!("expected gumbel or top:<fraction>, got {v:?}"),
                            })
                        }
                    }
                }
                "batch_size" => cfg.train.batch_size = parse_num(key, v)?,
                "lr" => cfg.train.lr = parse_num(key, v)?,
                "momentum" => cfg.train.momentum = parse_num(key, v)?,
                "epochs" => cfg.train.epochs = parse_num(key, v)?,
                "clip_norm" => cfg.train.clip_norm = parse_num(key, v)?,
                other => {
                    return Err(SptError::Config {
                        field: other.into(),
                        constraint: "unknown key".into(),
                    })
                }
            }
        }
        cfg.model.validate()?;
        if cfg.train.batch_size == 0 {
            return Err(SptError::Config {
                field: "batch_size".into(),
                constraint: "must be positive".into(),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SptError::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let list = |a: &[usize; 4]| {
            a.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "height={}", m.height);
        let _ = writeln!(s, "width={}", m.width);
        let _ = writeln!(s, "embed_dim={}", m.embed_dim);
        let _ = writeln!(s, "window={}", m.window);
        let _ = writeln!(s, "package_len={}", m.package_len);
        let _ = writeln!(s, "depths={}", list(&m.depths));
        let _ = writeln!(s, "heads={}", list(&m.heads));
        let _ = writeln!(s, "alpha={}", m.alpha);
        let _ = writeln!(s, "tau={}", m.tau);
        let _ = writeln!(s, "temp={}", m.temp);
        let _ = writeln!(s, "seed={}", m.seed);
        let _ = writeln!(s, "spa_start_stage={}", m.spa_start_stage);
        let _ = writeln!(s, "num_classes={}", m.num_classes);
        match m.selection {
            SelectionPolicy::Gumbel => s.push_str("selection=gumbel\n"),
            SelectionPolicy::TopFraction(f) => {
                let _ = writeln!(s, "selection=top:{f}");
            }
        }
        let _ = writeln!(s, "batch_size={}", self.train.batch_size);
        let _ = writeln!(s, "lr={}", self.train.lr);
        let _ = writeln!(s, "momentum={}", self.train.momentum);
        let _ = writeln!(s, "epochs={}", self.train.epochs);
        let _ = writeln!(s, "clip_norm={}", self.train.clip_norm);
        s
    }
}
