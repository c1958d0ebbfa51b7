//! Minimal dense-matrix autodiff used by every trainable component.

mod graph;
mod matrix;
mod optim;
mod params;

pub use graph::{gelu, sigmoid, Graph, Var, LAYER_NORM_EPS};
pub use matrix::Matrix;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamSet};
