//! Select-and-Pack Attention: supervised token selection, fixed-length
//! token packing with same-image masks, a four-stage hierarchical backbone
//! and an analytic plus instrumented cost model, on a small CPU tensor
//! engine with reverse-mode gradients.

pub mod attention;
pub mod config;
pub mod cost;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod packing;
pub mod selection;
pub mod types;
pub mod verify;

pub use config::{ModelConfig, RunConfig, SelectionPolicy, TrainConfig, NO_SPA};
pub use error::{Result, SptError};
pub use numerics::{DType, Graph, Real, Tensor, Var};
pub use packing::{AttentionMask, PackedBatch, PackingPlan, PlanEntry};
pub use selection::{Annotation, GateParams, Mode, PixelBox};
pub use types::{KeepMask, LabelGrid, ScoreMap, SelectLabelPyramid, SelectionMask, TokenGrid};
