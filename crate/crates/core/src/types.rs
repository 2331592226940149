//! Shared domain vocabulary: token grids, score maps, selection masks and
//! the multi-scale selection labels.

use crate::error::{Result, SptError};
use crate::numerics::{Real, Tensor, Var};

/// A batch of spatial feature maps, `[B, h, w, c]` channels-last.
#[derive(Debug, Clone, Copy)]
pub struct TokenGrid<'g, T: Real> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Var<'g, T>,
}

impl<'g, T: Real> TokenGrid<'g, T> {
    pub fn new(values: Var<'g, T>) -> Result<Self> {
        match values.shape()[..] {
            [batch, height, width, channels] => Ok(TokenGrid {
                batch,
                height,
                width,
                channels,
                values,
            }),
            ref s => Err(SptError::dim("TokenGrid", format!("expected [B,h,w,c], got {s:?}"))),
        }
    }

    /// Tokens per image, `h·w`.
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn with_values(&self, values: Var<'g, T>) -> Result<Self> {
        let g = TokenGrid::new(values)?;
        if (g.batch, g.height, g.width) != (self.batch, self.height, self.width) {
            return Err(SptError::dim(
                "TokenGrid",
                format!("spatial shape changed to {:?}", values.shape()),
            ));
        }
        Ok(g)
    }
}

/// Per-token selection logits, `[B, h, w, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct ScoreMap<'g, T: Real> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub logits: Var<'g, T>,
}

impl<'g, T: Real> ScoreMap<'g, T> {
    pub fn new(logits: Var<'g, T>) -> Result<Self> {
        match logits.shape()[..] {
            [batch, height, width, 1] => Ok(ScoreMap {
                batch,
                height,
                width,
                logits,
            }),
            ref s => Err(SptError::dim("ScoreMap", format!("expected [B,h,w,1], got {s:?}"))),
        }
    }

    pub fn spatial(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }
}

/// Hard per-token keep decisions, `[B, h, w]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepMask {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub keep: Vec<bool>,
}

impl KeepMask {
    pub fn new(batch: usize, height: usize, width: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != batch * height * width {
            return Err(SptError::dim(
                "KeepMask",
                format!("{batch}x{height}x{width} vs {} entries", keep.len()),
            ));
        }
        Ok(KeepMask {
            batch,
            height,
            width,
            keep,
        })
    }

    pub fn all(batch: usize, height: usize, width: usize) -> Self {
        KeepMask {
            batch,
            height,
            width,
            keep: vec![true; batch * height * width],
        }
    }

    pub fn tokens_per_image(&self) -> usize {
        self.height * self.width
    }

    /// `N_p`, selected tokens over the whole batch.
    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn per_image_counts(&self) -> Vec<usize> {
        let n = self.tokens_per_image();
        if n == 0 {
            return vec![0; self.batch];
        }
        self.keep
            .chunks(n)
            .map(|c| c.iter().filter(|&&k| k).count())
            .collect()
    }

    pub fn ratio(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.keep.len() as f64
        }
    }
}

/// Hard selection plus the keep-probabilities it was drawn from.
///
/// `multiplier` carries the binary keep values forward and routes gradients
/// into `soft` (straight-through).
#[derive(Debug, Clone)]
pub struct SelectionMask<'g, T: Real> {
    pub keep: KeepMask,
    /// Keep probabilities, `[B, h, w, 1]`.
    pub soft: Var<'g, T>,
    pub multiplier: Var<'g, T>,
}

/// One binary label grid of a pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl LabelGrid {
    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    /// 2×2 max (logical or) reduction. Requires even sides.
    pub fn pooled(&self) -> Result<LabelGrid> {
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(SptError::dim(
                "LabelGrid::pooled",
                format!("{}x{} is not even", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / 2, self.width / 2);
        let mut cells = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                cells.push(
                    self.get(2 * y, 2 * x)
                        || self.get(2 * y, 2 * x + 1)
                        || self.get(2 * y + 1, 2 * x)
                        || self.get(2 * y + 1, 2 * x + 1),
                );
            }
        }
        Ok(LabelGrid {
            height: h,
            width: w,
            cells,
        })
    }
}

/// Ground-truth keep labels of one image at `H/8`, `H/16` and `H/32`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectLabelPyramid {
    pub levels: [LabelGrid; 3],
}

impl SelectLabelPyramid {
    /// Builds the coarser levels from the finest one by 2×2 max pooling.
    pub fn from_finest(level0: LabelGrid) -> Result<Self> {
        let level1 = level0.pooled()?;
        let level2 = level1.pooled()?;
        Ok(SelectLabelPyramid {
            levels: [level0, level1, level2],
        })
    }

    pub fn is_nested(&self) -> bool {
        self.levels
            .windows(2)
            .all(|w| w[0].pooled().map(|p| p == w[1]).unwrap_or(false))
    }

    /// Stacks one level of several images into a `[B, h, w, 1]` tensor.
    pub fn stack<T: Real>(pyramids: &[&SelectLabelPyramid], level: usize) -> Result<Tensor<T>> {
        let Some(first) = pyramids.first() else {
            return Err(SptError::Usage("no label pyramids to stack".into()));
        };
        let (h, w) = (first.levels[level].height, first.levels[level].width);
        let mut data = Vec::with_capacity(pyramids.len() * h * w);
        for p in pyramids {
            let g = &p.levels[level];
            if (g.height, g.width) != (h, w) {
                return Err(SptError::dim("SelectLabelPyramid::stack", "mixed label sizes"));
            }
            data.extend(g.cells.iter().map(|&c| if c { T::ONE } else { T::ZERO }));
        }
        Tensor::new(&[pyramids.len(), h, w, 1], data)
    }
}

/// Pyramid level supervising a score map of stage `stage` (2, 3 or 4).
pub fn label_level_for_stage(stage: usize) -> Option<usize> {
    match stage {
        2..=4 => Some(stage - 2),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    #[test]
    fn grid_shape_checks() {
        let g = Graph::<f32>::new();
        let v = g.constant(Tensor::zeros(&[2, 4, 6, 3]));
        let grid = TokenGrid::new(v).unwrap();
        assert_eq!(grid.tokens(), 24);
        assert!(TokenGrid::new(g.constant(Tensor::zeros(&[2, 4, 6]))).is_err());
        assert!(ScoreMap::new(v).is_err());
    }

    #[test]
    fn keep_mask_counts() {
        let m = KeepMask::new(2, 1, 3, vec![true, false, true, false, false, true]).unwrap();
        assert_eq!(m.count(), 3);
        assert_eq!(m.per_image_counts(), vec![2, 1]);
        assert!((m.ratio() - 0.5).abs() < 1e-12);
        assert!(KeepMask::new(1, 2, 2, vec![true]).is_err());
    }

    #[test]
    fn pooled_labels_nest() {
        let mut cells = vec![false; 16];
        cells[5] = true;
        let p = SelectLabelPyramid::from_finest(LabelGrid {
            height: 4,
            width: 4,
            cells,
        })
        .unwrap();
        assert!(p.is_nested());
        assert_eq!(p.levels[1].cells, vec![true, false, false, false]);
        assert_eq!(p.levels[2].cells, vec![true]);
    }
}
