//! The four-stage backbone, classification head, total loss and
//! checkpoints.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, block_param_shapes, init_param, BlockParams};
use crate::config::ModelConfig;
use crate::error::{Result, SptError};
use crate::numerics::macs::{self, MacCategory};
use crate::numerics::{fixture, Graph, Real, Tensor, Var};
use crate::selection::{self, GateParams, Mode};
use crate::types::{label_level_for_stage, KeepMask, ScoreMap, SelectLabelPyramid, TokenGrid};

/// Pixels per side of a stage-1 patch.
pub const PATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: Arc<HashMap<String, usize>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: Arc::new(HashMap::new()),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(SptError::Usage(format!("duplicate parameter {name}")));
        }
        let id = self.tensors.len();
        Arc::make_mut(&mut self.index).insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| &self.tensors[id.0])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: Arc::clone(&self.index),
        }
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> BoundParams<'g, T> {
        BoundParams {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone())).collect(),
            index: Arc::clone(&self.index),
        }
    }

    /// Binds caller-made leaves, one per stored tensor in store order.
    pub fn bind_vars<'g>(&self, vars: &[Var<'g, T>]) -> Result<BoundParams<'g, T>> {
        if vars.len() != self.tensors.len()
            || vars.iter().zip(&self.tensors).any(|(v, t)| v.shape() != t.shape())
        {
            return Err(SptError::dim("bind_vars", "variables do not match the store"));
        }
        Ok(BoundParams {
            vars: vars.to_vec(),
            index: Arc::clone(&self.index),
        })
    }
}

/// Leaves of a [`ParamStore`] on one graph.
#[derive(Debug, Clone)]
pub struct BoundParams<'g, T: Real> {
    vars: Vec<Var<'g, T>>,
    index: Arc<HashMap<String, usize>>,
}

impl<'g, T: Real> BoundParams<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| SptError::Usage(format!("missing parameter {name}")))
    }

    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput<'g, T: Real> {
    pub params: BoundParams<'g, T>,
    /// `r1..r4`.
    pub features: Vec<TokenGrid<'g, T>>,
    /// The pre-gate map followed by the last fused map of every SPA stage
    /// (`s0, s1, s2` with SPA from stage 3).
    pub stage_scores: Vec<ScoreMap<'g, T>>,
    /// Every supervised map with the label pyramid level it is compared to:
    /// the pre-gate map and every SPA block map.
    pub supervised: Vec<(ScoreMap<'g, T>, usize)>,
    pub block_keeps: Vec<KeepMask>,
    /// Containers `B′` used by every SPA block.
    pub block_containers: Vec<usize>,
    /// `[B, K]`.
    pub logits: Var<'g, T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'g, T: Real> {
    pub total: Var<'g, T>,
    pub task: Var<'g, T>,
    pub select: Var<'g, T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectRatios {
    pub per_block: Vec<f64>,
    pub mean: f64,
}

/// Selected over total tokens per block and their mean. Without any SPA
/// block every token attends, so the mean is 1.
pub fn select_ratio_report(keeps: &[KeepMask]) -> SelectRatios {
    let per_block: Vec<f64> = keeps.iter().map(KeepMask::ratio).collect();
    let mean = if per_block.is_empty() {
        1.0
    } else {
        per_block.iter().sum::<f64>() / per_block.len() as f64
    };
    SelectRatios { per_block, mean }
}

#[derive(Debug, Clone)]
pub struct SptModel<T: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> SptModel<T> {
    /// Initialises every parameter from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let add = |params: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: String, shape: &[usize]| {
            let t = init_param(&name, shape, rng);
            params.insert(name, t).map(|_| ())
        };
        let c = cfg.embed_dim;
        let patch_in = PATCH * PATCH * 3;
        add(&mut params, &mut rng, "embed.weight".into(), &[patch_in, c])?;
        let bound = 1.0 / (patch_in as f64).sqrt();
        let bias = (0..c).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
        params.insert("embed.bias", Tensor::new(&[c], bias)?)?;
        add(&mut params, &mut rng, "embed.norm.gamma".into(), &[c])?;
        add(&mut params, &mut rng, "embed.norm.beta".into(), &[c])?;
        for stage in 1..=4 {
            let dim = cfg.stage_dim(stage);
            if stage > 1 {
                let prev = cfg.stage_dim(stage - 1);
                add(&mut params, &mut rng, format!("merge{stage}.norm.gamma"), &[4 * prev])?;
                add(&mut params, &mut rng, format!("merge{stage}.norm.beta"), &[4 * prev])?;
                add(&mut params, &mut rng, format!("merge{stage}.weight"), &[4 * prev, dim])?;
            }
            let spa = cfg.is_spa_stage(stage);
            let window = (!spa).then_some(cfg.window);
            for block in 0..cfg.depths[stage - 1] {
                let prefix = block_prefix(stage, block);
                for (name, shape) in block_param_shapes(dim, cfg.heads[stage - 1], window) {
                    add(&mut params, &mut rng, format!("{prefix}.{name}"), &shape)?;
                }
                if spa {
                    add(&mut params, &mut rng, format!("{prefix}.gate.weight"), &[dim, 1])?;
                    add(&mut params, &mut rng, format!("{prefix}.gate.bias"), &[1])?;
                }
            }
            if Self::has_pregate(&cfg, stage) {
                add(&mut params, &mut rng, "pregate.norm.gamma".into(), &[dim])?;
                add(&mut params, &mut rng, "pregate.norm.beta".into(), &[dim])?;
                add(&mut params, &mut rng, "pregate.weight".into(), &[dim, 1])?;
                add(&mut params, &mut rng, "pregate.bias".into(), &[1])?;
            }
        }
        let top = cfg.stage_dim(4);
        add(&mut params, &mut rng, "head.norm.gamma".into(), &[top])?;
        add(&mut params, &mut rng, "head.norm.beta".into(), &[top])?;
        add(&mut params, &mut rng, "head.weight".into(), &[top, cfg.num_classes])?;
        add(&mut params, &mut rng, "head.bias".into(), &[cfg.num_classes])?;
        Ok(SptModel { cfg, params })
    }

    /// A dedicated gate sits on the output of the stage just before the
    /// first SPA stage, unless that is stage 1.
    fn has_pregate(cfg: &ModelConfig, stage: usize) -> bool {
        stage >= 2 && stage + 1 == cfg.spa_start_stage && cfg.spa_start_stage <= 4
    }

    pub fn cast<U: Real>(&self) -> SptModel<U> {
        SptModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    pub fn forward<'g, R: Rng + ?Sized>(
        &self,
        g: &'g Graph<T>,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput<'g, T>> {
        self.forward_bound(self.params.bind(g), x, mode, rng)
    }

    /// Forward pass on already-bound parameters.
    pub fn forward_bound<'g, R: Rng + ?Sized>(
        &self,
        params: BoundParams<'g, T>,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput<'g, T>> {
        let cfg = &self.cfg;
        let [b, h, w, 3] = x.shape()[..] else {
            return Err(SptError::dim("forward", format!("image batch {:?}", x.shape())));
        };
        if (h, w) != (cfg.height, cfg.width) {
            return Err(SptError::dim(
                "forward",
                format!("{h}x{w} images for a {}x{} model", cfg.height, cfg.width),
            ));
        }
        let p = &params;
        let graph = p.vars[0].graph();
        let x = graph.constant(x.clone());
        let mut grid = self.patch_embed(p, x, b)?;

        let mut out = ForwardOutput {
            params: params.clone(),
            features: Vec::with_capacity(4),
            stage_scores: Vec::new(),
            supervised: Vec::new(),
            block_keeps: Vec::new(),
            block_containers: Vec::new(),
            logits: x,
        };
        let mut carried: Option<ScoreMap<'g, T>> = None;
        for stage in 1..=4 {
            if stage > 1 {
                grid = self.patch_merge(p, &grid, stage)?;
            }
            let heads = cfg.heads[stage - 1];
            let depth = cfg.depths[stage - 1];
            if cfg.is_spa_stage(stage) {
                let level = label_level_for_stage(stage).expect("SPA stages are 2..=4");
                let mut blocks = Vec::with_capacity(depth);
                for i in 0..depth {
                    let prefix = block_prefix(stage, i);
                    let bp = BlockParams::bind(heads, false, |n| p.get(&format!("{prefix}.{n}")))?;
                    let gate = GateParams {
                        weight: p.get(&format!("{prefix}.gate.weight"))?,
                        bias: p.get(&format!("{prefix}.gate.bias"))?,
                    };
                    blocks.push((bp, gate));
                }
                let st = attention::spa_stage(&grid, carried.as_ref(), &blocks, cfg, mode, rng)?;
                grid = st.grid;
                out.supervised.extend(st.block_scores.iter().map(|s| (*s, level)));
                out.block_keeps.extend(st.block_keeps);
                out.block_containers.extend(st.containers);
                out.stage_scores.push(st.scores);
                carried = Some(st.scores);
            } else {
                let mut blocks = Vec::with_capacity(depth);
                for i in 0..depth {
                    let prefix = block_prefix(stage, i);
                    blocks.push(BlockParams::bind(heads, true, |n| p.get(&format!("{prefix}.{n}")))?);
                }
                grid = attention::window_stage(&grid, &blocks, cfg.window)?;
            }
            if Self::has_pregate(cfg, stage) {
                let s0 = self.pregate(p, &grid)?;
                let level = label_level_for_stage(stage).expect("pre-gate stages are 2..=3");
                out.supervised.push((s0, level));
                out.stage_scores.push(s0);
                carried = Some(s0);
            }
            out.features.push(grid);
        }
        out.logits = self.head(p, &grid)?;
        Ok(out)
    }

    /// 4×4 stride-4 patches projected to `C` channels, then normalised.
    fn patch_embed<'g>(&self, p: &BoundParams<'g, T>, x: Var<'g, T>, b: usize) -> Result<TokenGrid<'g, T>> {
        let _cat = macs::category(MacCategory::Other);
        let (h, w) = (self.cfg.height / PATCH, self.cfg.width / PATCH);
        let patches = x
            .reshape(&[b, h, PATCH, w, PATCH, 3])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, h, w, PATCH * PATCH * 3])?;
        let y = patches
            .matmul(p.get("embed.weight")?)?
            .add(p.get("embed.bias")?)?
            .layer_norm(p.get("embed.norm.gamma")?, p.get("embed.norm.beta")?)?;
        TokenGrid::new(y)
    }

    /// 2×2 neighbourhood concatenation, normalisation and a linear map to
    /// twice the channels.
    fn patch_merge<'g>(&self, p: &BoundParams<'g, T>, g: &TokenGrid<'g, T>, stage: usize) -> Result<TokenGrid<'g, T>> {
        let _cat = macs::category(MacCategory::Other);
        let (h, w, c) = (g.height / 2, g.width / 2, g.channels);
        let y = g
            .values
            .reshape(&[g.batch, h, 2, w, 2, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[g.batch, h, w, 4 * c])?
            .layer_norm(
                p.get(&format!("merge{stage}.norm.gamma"))?,
                p.get(&format!("merge{stage}.norm.beta"))?,
            )?
            .matmul(p.get(&format!("merge{stage}.weight"))?)?;
        TokenGrid::new(y)
    }

    fn pregate<'g>(&self, p: &BoundParams<'g, T>, g: &TokenGrid<'g, T>) -> Result<ScoreMap<'g, T>> {
        let _cat = macs::category(MacCategory::Attention);
        let z = g.with_values(g.values.layer_norm(p.get("pregate.norm.gamma")?, p.get("pregate.norm.beta")?)?)?;
        let gate = GateParams {
            weight: p.get("pregate.weight")?,
            bias: p.get("pregate.bias")?,
        };
        selection::gate_scores(&z, &gate)
    }

    fn head<'g>(&self, p: &BoundParams<'g, T>, g: &TokenGrid<'g, T>) -> Result<Var<'g, T>> {
        let _cat = macs::category(MacCategory::Other);
        g.values
            .layer_norm(p.get("head.norm.gamma")?, p.get("head.norm.beta")?)?
            .reshape(&[g.batch, g.tokens(), g.channels])?
            .mean_axis(1)?
            .matmul(p.get("head.weight")?)?
            .add(p.get("head.bias")?)
    }

    /// Writes the parameters as consecutive tensor records to `path` and a
    /// `name,shape,offset` manifest next to it.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| SptError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut manifest = String::from("name,shape,offset\n");
        let mut offset = 0;
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(manifest, "{name},{},{offset}", shape.join("x"));
            fixture::write_tensor(&mut out, t).map_err(|e| SptError::io(path, e))?;
            offset += fixture::encoded_len(t.shape());
        }
        out.flush().map_err(|e| SptError::io(path, e))?;
        let mpath = manifest_path(path);
        std::fs::write(&mpath, manifest).map_err(|e| SptError::io(&mpath, e))
    }

    /// Loads parameters saved by [`SptModel::save_checkpoint`] into a model
    /// built from `cfg`; names and shapes must match exactly.
    pub fn load_checkpoint(cfg: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        let mpath = manifest_path(path);
        let manifest = std::fs::read_to_string(&mpath).map_err(|e| SptError::io(&mpath, e))?;
        let file = std::fs::File::open(path).map_err(|e| SptError::io(path, e))?;
        let mut input = BufReader::new(file);
        let bad = |detail: String| SptError::Format {
            what: "checkpoint manifest",
            detail,
        };
        let mut seen = 0;
        for line in manifest.lines().skip(1).filter(|l| !l.is_empty()) {
            let parts: Vec<&str> = line.split(',').collect();
            let [name, _, offset] = parts[..] else {
                return Err(bad(format!("malformed line {line:?}")));
            };
            let offset: u64 = offset.parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
            let id = model
                .params
                .id(name)
                .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            input.seek(SeekFrom::Start(offset)).map_err(|e| SptError::io(path, e))?;
            let t: Tensor<T> = fixture::read_tensor(&mut (&mut input).take(u64::MAX))?;
            if t.shape() != model.params.tensor(id).shape() {
                return Err(bad(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.params.tensor(id).shape()
                )));
            }
            *model.params.tensor_mut(id) = t;
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(bad(format!("{seen} of {} parameters present", model.params.len())));
        }
        Ok(model)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// `L_SPT = L_task + α·L_select`. Labels are required whenever the forward
/// pass produced supervised score maps.
pub fn total_loss<'g, T: Real>(
    out: &ForwardOutput<'g, T>,
    targets: &[usize],
    labels: Option<&[&SelectLabelPyramid]>,
    alpha: f64,
) -> Result<LossTerms<'g, T>> {
    let task = out.logits.cross_entropy(targets)?;
    let g = out.logits.graph();
    let select = if out.supervised.is_empty() {
        g.constant(Tensor::scalar(T::ZERO))
    } else {
        let labels = labels.ok_or_else(|| SptError::Usage("selection labels are required for training".into()))?;
        let mut terms = Vec::with_capacity(out.supervised.len());
        for (map, level) in &out.supervised {
            let y = SelectLabelPyramid::stack::<T>(labels, *level)?;
            if y.shape() != map.logits.shape().as_slice() {
                return Err(SptError::dim(
                    "total_loss",
                    format!("labels {:?} for score map {:?}", y.shape(), map.logits.shape()),
                ));
            }
            terms.push((*map, g.constant(y)));
        }
        selection::select_loss(&terms)?
    };
    let total = task.add(select.scale(alpha)?)?;
    Ok(LossTerms { total, task, select })
}
