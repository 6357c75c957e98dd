//! A compact reverse-mode automatic differentiation engine over dense `f64`
//! tensors, with the handful of layers and optimizers needed to train small
//! image classifiers and generators on a CPU.
//!
//! Computation is recorded on a [`Graph`] tape; [`Graph::backward`] walks the
//! tape in reverse. Everything is single-threaded and bit-deterministic.

mod graph;
mod kernels;
mod network;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use network::{Layer, Network, NetworkBuilder};
pub use optim::{Adam, Sgd};
pub use tensor::{Tensor, TensorError};
