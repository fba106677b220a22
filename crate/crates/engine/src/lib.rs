//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records every primitive applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a single-element node walks the records in reverse
//! creation order and returns a [`GradientMap`] holding `∂root/∂leaf` for
//! every reachable leaf created with [`Graph::param`].
//!
//! ```
//! use engine::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
//! let y = x.mul(x).unwrap().sum().unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! The element type is generic over [`Scalar`] (`f32` or `f64`). The set of
//! primitives is closed; see [`OpKind`].

pub mod error;
pub mod gradcheck;
mod graph;
mod op;
mod scalar;
mod tensor;

pub use error::{EngineError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{GradientMap, Graph, Var};
pub use op::{CustomOp, Op, OpKind, Padding};
pub use scalar::Scalar;
pub use tensor::{numel, Tensor};
