//! Dense `f64` arrays with a static computation graph and reverse-mode
//! differentiation.
//!
//! A [`Graph`] is built once per batch shape by appending nodes; parameter
//! values are supplied at [`Graph::forward`] time from a [`ParamSet`], so the
//! same graph serves every training step. [`Graph::backward`] returns the
//! gradient of every declared parameter for the given output gradients.
//!
//! The primitive set is deliberately small: dense, 3×3 convolution, relu,
//! mean-pool, flatten/reshape, add/sub/mul/scale, matmul, sum, mean,
//! row normalization, log, exp, softmax, concat, and a per-sample planar
//! point-set map used by the contrastive losses. Elementwise ops require equal
//! shapes; the only broadcast is the bias of dense/conv layers.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{point_affine_row, Gradients, Graph, NodeId, Op};
pub use tensor::{ParamSet, Tensor};
