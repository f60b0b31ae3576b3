//! Dense tensors, a tape-based reverse-mode autodiff graph, and a
//! finite-difference gradient checker.
//!
//! ```
//! use dpn_tensor::{Graph, ParamStore, Tensor};
//!
//! let store = ParamStore::<f64>::new();
//! let mut g = Graph::new(&store);
//! let x = g.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum_all(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
//! ```

mod error;
mod float;
mod gradcheck;
mod graph;
mod store;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use gradcheck::{grad_check, grad_check_all, GradCheckOptions, GradCheckReport, DEFAULT_STEP};
pub use graph::{ConvMode, Gradients, Graph, Var, BN_EPS, BN_MOMENTUM};
pub use store::{Param, ParamId, ParamKind, ParamStore};
pub use tensor::{broadcast_shapes, numel, Tensor};
