//! Minimal deterministic reverse-mode automatic differentiation.
//!
//! Just enough operators for a small convolutional encoder/decoder with
//! LSTM recurrences: elementwise arithmetic, `matmul`, `conv2d`,
//! `conv_transpose2d`, the usual activations, reductions, `reshape`,
//! `concat` and `slice`. Everything is 64-bit and summation order is fixed,
//! so identical inputs give bit-identical forward and backward results.
//!
//! ```
//! use iceflow_autodiff::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.square().sum();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
mod graph;
mod kernels;
mod lstm;
mod optim;
mod params;
mod tensor;

pub mod gradcheck;

pub use error::{CheckpointError, TensorError};
pub use gradcheck::{check_gradients, grad_check, Coords, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, Var};
pub use lstm::{lstm_cell, LstmWeights};
pub use optim::Adam;
pub use params::ParamStore;
pub use tensor::Tensor;
