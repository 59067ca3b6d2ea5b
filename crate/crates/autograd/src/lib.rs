//! Reverse-mode automatic differentiation for small dense models.
//!
//! A [`Graph`] records one forward pass over `Array2<f64>` values; calling
//! [`Graph::backward`] on a scalar node returns [`Gradients`] for every
//! node. Trainable tensors live in a [`ParamStore`] and are updated with
//! [`Adam`]. The [`gradcheck`] module holds finite-difference oracles.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use graph::{softmax_rows, Gradients, Graph, Var};
pub use params::{ParamError, ParamLayout, ParamStore};
