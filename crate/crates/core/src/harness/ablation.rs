//! The ablation grid: dense baseline, SPA with and without selection
//! supervision, onset stage, and uniform top-half selection.

use std::fmt::Write as _;

use crate::config::{ModelConfig, SelectionPolicy, TrainConfig, NO_SPA};
use crate::error::Result;
use crate::harness::data::SparseSample;
use crate::harness::train::{evaluate, train};
use crate::model::SptModel;

pub const ABLATION_CSV_HEADER: &str = "variant,accuracy,ratio_mean,attention_macs_per_image,total_macs_per_image";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: f64,
    pub ratio_mean: f64,
    pub attention_macs: f64,
    pub total_macs: f64,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{}",
            self.variant, self.accuracy, self.ratio_mean, self.attention_macs, self.total_macs
        );
        s
    }
}

/// Named model configurations derived from `base`.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let with = |start: usize, alpha: f64, selection: SelectionPolicy| ModelConfig {
        spa_start_stage: start,
        alpha,
        selection,
        ..base.clone()
    };
    let gumbel = SelectionPolicy::Gumbel;
    vec![
        ("dense", with(NO_SPA, 0.0, gumbel)),
        ("spa_no_select_loss", with(3, 0.0, gumbel)),
        ("spa_select_loss", with(3, base.alpha, gumbel)),
        ("spa_start2", with(2, base.alpha, gumbel)),
        ("spa_start4", with(4, base.alpha, gumbel)),
        ("top50", with(3, base.alpha, SelectionPolicy::TopFraction(0.5))),
    ]
}

/// Trains and evaluates one variant.
pub fn run_variant(
    name: &str,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train_set: &[SparseSample],
    test_set: &[SparseSample],
) -> Result<AblationRow> {
    let mut model = SptModel::new(cfg.clone())?;
    train(&mut model, train_set, tc, |_| {})?;
    let ev = evaluate(&model, test_set, tc.batch_size)?;
    let images = ev.images.max(1) as f64;
    Ok(AblationRow {
        variant: name.to_string(),
        accuracy: ev.accuracy,
        ratio_mean: ev.ratio_mean,
        attention_macs: ev.macs.attention as f64 / images,
        total_macs: ev.macs.total() as f64 / images,
    })
}

/// Every variant of [`ablation_variants`] on the same data, in order.
pub fn ablation_runs(
    base: &ModelConfig,
    tc: &TrainConfig,
    train_set: &[SparseSample],
    test_set: &[SparseSample],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(base) {
        let row = run_variant(name, &cfg, tc, train_set, test_set)?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
