//! Synthetic data, training, evaluation and ablation runs.

pub mod ablation;
pub mod data;
pub mod train;

pub use data::{gen_sparse_dataset, Density, SparseSample};
pub use train::{evaluate, train, EpochMetrics, EvalMetrics};
pub use ablation::{ablation_runs, ablation_variants, AblationRow, ABLATION_CSV_HEADER};
