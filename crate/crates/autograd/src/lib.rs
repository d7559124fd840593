//! Minimal reverse-mode automatic differentiation for the motion models.
//!
//! Everything is `f64`. Convolutions are channel-last. Gradients are exact up
//! to floating-point rounding, so finite-difference checks in the model crates
//! can run at tight tolerances.

mod graph;
mod optim;
mod params;

pub use graph::{reduce_to_shape, Conv2dGeom, Grads, Graph, Tensor, Var};
pub use optim::AdamW;
pub use params::{Bindings, ParamStore};

pub mod gradcheck;
