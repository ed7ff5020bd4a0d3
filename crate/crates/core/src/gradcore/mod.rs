//! Dense-matrix reverse-mode differentiation and first-order optimizers.

mod graph;
mod matrix;
mod optim;
mod params;

pub use graph::{ElemOp, Gradients, Graph, Var, LOG_CLAMP};
pub use matrix::Matrix;
pub use optim::{clip_global_norm, Adam, Optimizer, Sgd, DEFAULT_CLIP_NORM};
pub use params::ParamSet;
