//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)
//! values.
//!
//! A [`Graph`] is a tape: every operator computes its forward value eagerly and
//! records what it needs for the backward pass. Graphs are single-use; build a
//! fresh one per forward pass.

mod graph;
mod kernels;

pub use graph::{BatchStats, Gradients, Graph, Var};
