//! A small reverse-mode automatic differentiation engine.
//!
//! Values live on a [`Graph`] tape as [`Var`]s. Backward rules are recorded
//! with the same operations as the forward pass, so [`Graph::grad`] with
//! `create_graph = true` returns gradients that can be differentiated again.
//! Gradient inversion needs this: its objective depends on model gradients.
//!
//! Kernels run on rayon when the `parallel` feature is on (the default) and
//! sequentially otherwise. Both paths give bit-identical results.

mod graph;
pub mod nn;
mod ops;
pub mod par;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::{broadcast_shape, numel, Tensor, PAD_INDEX};
