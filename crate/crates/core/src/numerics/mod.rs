//! Dense-array substrate: tensors, kernels, reverse-mode gradients,
//! MAC instrumentation and finite-difference checking.

pub mod fixture;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod macs;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{
    layer_norm, masked_softmax_lastdim, matmul, matmul_nt, max_pool_2x2, pointwise, BinaryOp,
    ExclusionMask, Pointwise, UnaryOp,
};
pub use macs::{MacCategory, MacCounts};
pub use tensor::{DType, Real, Tensor};
