//! Reverse-mode differentiable tensors, AdamW with cosine decay, and a
//! named-tensor checkpoint format.
//!
//! ```
//! use dexmode_autodiff::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
//! ```

mod check;
mod checkpoint;
mod error;
mod graph;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use check::{analytic_grads, finite_diff_check};
pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry};
pub use error::{AdError, Result};
pub use graph::{Gradients, Graph, Var};
pub use optim::{cosine_multiplier, AdamWConfig, OptimizerState};
pub use params::{ParamId, ParamStore, Session};
pub use scalar::Scalar;
pub use tensor::Tensor;
