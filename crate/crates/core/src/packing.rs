//! Packing selected tokens into fixed-length containers.
//!
//! Selected tokens are enumerated image by image (batch order), row-major
//! within each image, and written into containers of `L` slots in that
//! order. Only the last container can hold padding. An image's tokens may
//! span several containers and a container may mix images; attention is
//! kept within each image by [`AttentionMask`].

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Result, SptError};
use crate::numerics::{ExclusionMask, Real, Var};
use crate::types::{KeepMask, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub image_id: usize,
    /// Row-major token index within the image.
    pub src_index: usize,
    pub container: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackingPlan {
    pub entries: Vec<PlanEntry>,
    /// `B′`
    pub num_containers: usize,
    /// `N_p`
    pub num_selected: usize,
    pub pad_count: usize,
    /// Container length `L`.
    pub len: usize,
    /// Tokens per image of the source grid.
    pub tokens_per_image: usize,
    pub batch: usize,
}

pub fn build_packing_plan(mask: &KeepMask, len: usize) -> Result<PackingPlan> {
    if len == 0 {
        return Err(SptError::Usage("package length must be at least 1".into()));
    }
    let n = mask.tokens_per_image();
    let mut entries = Vec::with_capacity(mask.count());
    for (flat, _) in mask.keep.iter().enumerate().filter(|(_, &k)| k) {
        let pos = entries.len();
        entries.push(PlanEntry {
            image_id: flat / n,
            src_index: flat % n,
            container: pos / len,
            slot: pos % len,
        });
    }
    let num_selected = entries.len();
    let num_containers = num_selected.div_ceil(len);
    Ok(PackingPlan {
        entries,
        num_containers,
        num_selected,
        pad_count: num_containers * len - num_selected,
        len,
        tokens_per_image: n,
        batch: mask.batch,
    })
}

impl PackingPlan {
    /// Image id of every slot, `None` for padding.
    pub fn slot_image(&self) -> Vec<Option<usize>> {
        let mut slots = vec![None; self.num_containers * self.len];
        for e in &self.entries {
            slots[e.container * self.len + e.slot] = Some(e.image_id);
        }
        slots
    }

    fn flat_slot(&self, e: &PlanEntry) -> usize {
        e.container * self.len + e.slot
    }

    fn flat_src(&self, e: &PlanEntry) -> usize {
        e.image_id * self.tokens_per_image + e.src_index
    }

    /// `image_id,src_index,container,slot` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,src_index,container,slot\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{}", e.image_id, e.src_index, e.container, e.slot);
        }
        s
    }

    /// Parses the CSV dump; plan-level counts are recomputed from the rows.
    pub fn from_csv(text: &str, len: usize, batch: usize, tokens_per_image: usize) -> Result<Self> {
        let bad = |d: String| SptError::Format {
            what: "plan csv",
            detail: d,
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("image_id,src_index,container,slot") {
            return Err(bad("missing header".into()));
        }
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let v: Vec<usize> = line
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("{line:?}: {e}")))?;
            let [image_id, src_index, container, slot] = v[..] else {
                return Err(bad(format!("{line:?}: expected 4 fields")));
            };
            entries.push(PlanEntry {
                image_id,
                src_index,
                container,
                slot,
            });
        }
        let num_selected = entries.len();
        let num_containers = num_selected.div_ceil(len.max(1));
        Ok(PackingPlan {
            entries,
            num_containers,
            num_selected,
            pad_count: num_containers * len - num_selected,
            len,
            tokens_per_image,
            batch,
        })
    }
}

/// Tokens gathered into containers, `[B′, L, c]`, with the image of every
/// slot. Padding slots are zero.
#[derive(Debug, Clone)]
pub struct PackedBatch<'g, T: Real> {
    pub values: Var<'g, T>,
    pub slot_image: Vec<Option<usize>>,
}

fn check_plan_against<T: Real>(op: &'static str, plan: &PackingPlan, grid: &TokenGrid<'_, T>) -> Result<()> {
    if plan.tokens_per_image != grid.tokens() || plan.batch != grid.batch {
        return Err(SptError::dim(
            op,
            format!(
                "plan for {}x{} tokens applied to a {}x{} grid",
                plan.batch,
                plan.tokens_per_image,
                grid.batch,
                grid.tokens()
            ),
        ));
    }
    for e in &plan.entries {
        if e.image_id >= grid.batch || e.src_index >= grid.tokens() || e.slot >= plan.len || e.container >= plan.num_containers {
            return Err(SptError::dim(op, format!("entry {e:?} out of bounds")));
        }
    }
    Ok(())
}

pub fn pack_tokens<'g, T: Real>(src: &TokenGrid<'g, T>, plan: &PackingPlan) -> Result<PackedBatch<'g, T>> {
    check_plan_against("pack_tokens", plan, src)?;
    let mut idx = vec![None; plan.num_containers * plan.len];
    for e in &plan.entries {
        idx[plan.flat_slot(e)] = Some(plan.flat_src(e));
    }
    let values = src
        .values
        .gather_rows(src.channels, Arc::new(idx))?
        .reshape(&[plan.num_containers, plan.len, src.channels])?;
    Ok(PackedBatch {
        values,
        slot_image: plan.slot_image(),
    })
}

/// Pairwise same-image validity of every container, `[B′, L, L]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub containers: usize,
    pub len: usize,
    pub valid: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, container: usize, i: usize, j: usize) -> bool {
        self.valid[(container * self.len + i) * self.len + j]
    }

    /// As a softmax exclusion mask broadcasting over a heads axis:
    /// `[B′, 1, L, L]`.
    pub fn to_exclusion(&self) -> ExclusionMask {
        ExclusionMask {
            shape: vec![self.containers, 1, self.len, self.len],
            valid: self.valid.clone(),
        }
    }
}

pub fn build_same_image_mask(slot_image: &[Option<usize>], len: usize) -> Result<AttentionMask> {
    if len == 0 || !slot_image.len().is_multiple_of(len) {
        return Err(SptError::dim(
            "build_same_image_mask",
            format!("{} slots in containers of {len}", slot_image.len()),
        ));
    }
    let containers = slot_image.len() / len;
    let mut valid = Vec::with_capacity(containers * len * len);
    for c in slot_image.chunks(len) {
        for i in c {
            for j in c {
                valid.push(matches!((i, j), (Some(a), Some(b)) if a == b));
            }
        }
    }
    Ok(AttentionMask {
        containers,
        len,
        valid,
    })
}

/// Writes every packed slot back to its source position in `base`; all
/// other positions keep `base`'s values.
pub fn unpack_scatter<'g, T: Real>(
    attn_out: &PackedBatch<'g, T>,
    plan: &PackingPlan,
    base: &TokenGrid<'g, T>,
) -> Result<TokenGrid<'g, T>> {
    check_plan_against("unpack_scatter", plan, base)?;
    let shape = attn_out.values.shape();
    if shape != [plan.num_containers, plan.len, base.channels] {
        return Err(SptError::dim(
            "unpack_scatter",
            format!("packed {shape:?} does not match plan {}x{}", plan.num_containers, plan.len),
        ));
    }
    if plan.entries.is_empty() {
        return Ok(*base);
    }
    let pairs: Vec<(usize, usize)> = plan
        .entries
        .iter()
        .map(|e| (plan.flat_slot(e), plan.flat_src(e)))
        .collect();
    let out = base
        .values
        .scatter_rows(attn_out.values, base.channels, Arc::new(pairs))?;
    base.with_values(out)
}
