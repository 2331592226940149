//! Synthetic sparse classification data.
//!
//! Every class is a family of oriented stripes with its own colour tint.
//! The textured object occupies either the top-left quarter of the image
//! (`corner-quarter`) or a random box of 10–25% of the image area
//! (`random-box`); all other pixels are exactly zero.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, SptError};
use crate::numerics::{fixture, Tensor};
use crate::selection::{derive_select_labels, Annotation, PixelBox};
use crate::types::SelectLabelPyramid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Density {
    CornerQuarter,
    RandomBox,
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Density::CornerQuarter => "corner-quarter",
            Density::RandomBox => "random-box",
        })
    }
}

impl FromStr for Density {
    type Err = SptError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corner-quarter" => Ok(Density::CornerQuarter),
            "random-box" => Ok(Density::RandomBox),
            other => Err(SptError::Usage(format!(
                "unknown density {other:?} (expected corner-quarter or random-box)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSample {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub class_id: usize,
    pub objects: Annotation,
    pub pyramid: SelectLabelPyramid,
}

fn class_tint(class: usize, k: usize) -> [f64; 3] {
    let hue = class as f64 / k as f64;
    let ch = |offset: f64| 0.55 + 0.45 * (2.0 * PI * (hue + offset)).cos();
    [ch(0.0), ch(1.0 / 3.0), ch(2.0 / 3.0)]
}

fn object_box<R: Rng>(density: Density, h: usize, w: usize, rng: &mut R) -> PixelBox {
    match density {
        Density::CornerQuarter => PixelBox {
            x0: 0,
            y0: 0,
            x1: w / 2,
            y1: h / 2,
        },
        Density::RandomBox => {
            let area = rng.gen_range(0.10..=0.25) * (h * w) as f64;
            let aspect: f64 = rng.gen_range(0.5..=2.0);
            let bw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
            let bh = ((area / bw as f64).round() as usize).clamp(1, h);
            let x0 = rng.gen_range(0..=w - bw);
            let y0 = rng.gen_range(0..=h - bh);
            PixelBox {
                x0,
                y0,
                x1: x0 + bw,
                y1: y0 + bh,
            }
        }
    }
}

/// One sample from its own seeded stream.
pub fn gen_sample(index: u64, k: usize, h: usize, w: usize, density: Density, seed: u64) -> Result<SparseSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let class_id = rng.gen_range(0..k);
    let bx = object_box(density, h, w, &mut rng);
    let theta = PI * class_id as f64 / k as f64 + rng.gen_range(-0.08..0.08);
    let freq = 1.0 / 6.0 * (1.0 + 0.5 * (class_id % 3) as f64) * rng.gen_range(0.9..1.1);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let tint = class_tint(class_id, k);
    let gain = rng.gen_range(0.8..1.0);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut data = vec![0f32; h * w * 3];
    for y in bx.y0..bx.y1 {
        for x in bx.x0..bx.x1 {
            let u = (x - bx.x0) as f64 * ct + (y - bx.y0) as f64 * st;
            let v = 0.55 + 0.45 * (2.0 * PI * freq * u + phase).sin();
            for (ch, t) in tint.iter().enumerate() {
                let noise = rng.gen_range(-0.05..0.05);
                data[(y * w + x) * 3 + ch] = (gain * v * t + noise).clamp(0.02, 1.0) as f32;
            }
        }
    }
    let objects = Annotation::Boxes(vec![bx]);
    let pyramid = derive_select_labels(&objects, h, w)?;
    Ok(SparseSample {
        image: Tensor::new(&[h, w, 3], data)?,
        class_id,
        objects,
        pyramid,
    })
}

/// `n` samples over `k` classes, generated in parallel from per-sample
/// streams of `seed`.
pub fn gen_sparse_dataset(n: usize, k: usize, h: usize, w: usize, density: Density, seed: u64) -> Result<Vec<SparseSample>> {
    if k < 2 {
        return Err(SptError::Usage(format!("need at least 2 classes, got {k}")));
    }
    (0..n as u64)
        .into_par_iter()
        .map(|i| gen_sample(i, k, h, w, density, seed))
        .collect()
}

/// Stacks images into a `[B, H, W, 3]` batch.
pub fn stack_images(samples: &[&SparseSample]) -> Result<Tensor<f32>> {
    let Some(first) = samples.first() else {
        return Err(SptError::Usage("empty batch".into()));
    };
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(SptError::dim("stack_images", "mixed image sizes"));
        }
        data.extend_from_slice(s.image.data());
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

pub const INDEX_HEADER: &str = "sample_id,class_id,annotation";

fn sample_stem(i: usize) -> String {
    format!("sample_{i:05}")
}

/// Writes `sample_NNNNN.spt` image tensors, `sample_NNNNN.boxes`
/// annotations and `index.csv`.
pub fn save_dataset(dir: &Path, samples: &[SparseSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SptError::io(dir, e))?;
    let mut index = format!("{INDEX_HEADER}\n");
    for (i, s) in samples.iter().enumerate() {
        let stem = sample_stem(i);
        fixture::save(&dir.join(format!("{stem}.spt")), &s.image)?;
        let ann = format!("{stem}.boxes");
        let text = match &s.objects {
            Annotation::Boxes(b) => Annotation::boxes_text(b),
            Annotation::Mask { .. } => {
                return Err(SptError::Usage("mask annotations are not cached".into()));
            }
        };
        let path = dir.join(&ann);
        std::fs::write(&path, text).map_err(|e| SptError::io(&path, e))?;
        index.push_str(&format!("{stem},{},{ann}\n", s.class_id));
    }
    let path = dir.join("index.csv");
    std::fs::write(&path, index).map_err(|e| SptError::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SparseSample>> {
    let path = dir.join("index.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| SptError::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(SptError::Format {
            what: "dataset index",
            detail: format!("{} does not start with {INDEX_HEADER:?}", path.display()),
        });
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split(',').collect();
        let [stem, class, ann] = parts[..] else {
            return Err(SptError::Format {
                what: "dataset index",
                detail: format!("bad row {line:?}"),
            });
        };
        let class_id = class.parse().map_err(|_| SptError::Format {
            what: "dataset index",
            detail: format!("bad class in {line:?}"),
        })?;
        let image: Tensor<f32> = fixture::load(&dir.join(format!("{stem}.spt")))?;
        let [h, w, 3] = image.shape()[..] else {
            return Err(SptError::Format {
                what: "dataset image",
                detail: format!("{stem} has shape {:?}", image.shape()),
            });
        };
        let objects = Annotation::load(&dir.join(ann))?;
        let pyramid = derive_select_labels(&objects, h, w)?;
        out.push(SparseSample {
            image,
            class_id,
            objects,
            pyramid,
        });
    }
    Ok(out)
}

/// Held-out accuracy of a nearest-centroid classifier on mean pixel colour.
pub fn nearest_centroid_accuracy(train: &[SparseSample], test: &[SparseSample], k: usize) -> f64 {
    let feature = |s: &SparseSample| {
        let mut f = [0f64; 3];
        for px in s.image.data().chunks(3) {
            for (a, &v) in f.iter_mut().zip(px) {
                *a += v as f64;
            }
        }
        f
    };
    let mut centroids = vec![[0f64; 3]; k];
    let mut counts = vec![0usize; k];
    for s in train {
        let f = feature(s);
        for (c, v) in centroids[s.class_id].iter_mut().zip(f) {
            *c += v;
        }
        counts[s.class_id] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = test
        .iter()
        .filter(|s| {
            let f = feature(s);
            let best = (0..k)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| {
                    let d = |c: usize| centroids[c].iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap_or(0);
            best == s.class_id
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
