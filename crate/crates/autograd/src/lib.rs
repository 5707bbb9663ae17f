//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is tape based: a [`Graph`] records every operation of one forward pass, and
//! [`Graph::backward`] walks the tape in reverse. Layout is row-major with volumes stored as
//! `[batch, channel, depth, height, width]`.

pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use optim::{GradAccumulator, LrSchedule, Optimizer, OptimizerKind};
pub use params::{BlobError, Ctx, Param, ParamId, ParamStore};
pub use tensor::Tensor;
