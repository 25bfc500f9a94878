//! Dense differentiable arrays, reverse-mode gradients and the Adam optimizer.

mod array;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;

pub use array::DiffArray;
pub use graph::{sigmoid, Gradients, Graph, Var, BCE_EPS};
pub use optim::{AdamConfig, OptimState};
pub use params::{ParamId, ParamStore};
