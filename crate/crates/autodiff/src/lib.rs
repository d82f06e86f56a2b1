//! Minimal reverse-mode differentiation over 2-D `f64` tensors.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! sweeps the tape in reverse and returns gradients for the [`ParamStore`]
//! entries that the loss reaches. Losses, Adam with a linear schedule,
//! transformer blocks and a finite-difference checker sit on top.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod nn;
pub mod optim;
mod tensor;

pub use error::{Error, Result};
pub use graph::{sigmoid, Graph, NodeId};
pub use optim::{adam_step, lr_at, OptimizerState};
pub use tensor::{Gradients, Init, ParamId, ParamStore, Tensor};
