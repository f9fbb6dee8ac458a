//! Reverse-mode automatic differentiation over dense tensors.

mod backward;
mod graph;
pub(crate) mod kernels;
mod ops;

pub use graph::{Gradients, Graph, Var};
pub use ops::{AttentionMask, PROB_CLAMP};
