//! Reverse-mode automatic differentiation over dense NCHW arrays.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). A [`Graph`] records
//! one forward pass; [`Graph::backward`] returns gradients for every leaf
//! created with [`Graph::param`]. Parameters live in a [`ParamSet`] and are
//! placed on a graph through a [`Binder`].

mod array;
pub mod gradcheck;
mod graph;
mod ops;
pub mod optim;
mod params;
mod scalar;

pub use array::Array;
pub use gradcheck::{analytic_gradients, check_gradients, compare_gradients, numeric_gradients, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use ops::conv::Conv2dSpec;
pub use optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig};
pub use params::{Binder, ParamSet};
pub use scalar::Scalar;

pub type Array32 = Array<f32>;
pub type Array64 = Array<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape error: {0}")]
pub struct ShapeError(String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}
