//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations on [`Tensor`]s that live on a [`Tape`] are recorded in order.
//! [`grad`] walks the tape backwards; with `create_graph` set, the backward
//! pass is recorded on the same tape so gradients can be differentiated
//! again. That is the only mechanism for higher-order derivatives: every
//! backward rule is expressed with the same primitives as the forward pass.
//!
//! ```
//! use ebwm_autodiff::{grad, NdArray, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(NdArray::scalar(2.0));
//! let y = x.powf(3.0).unwrap();
//! let dy = grad(&y, &[&x], true).unwrap().remove(0);
//! let d2y = grad(&dy, &[&x], false).unwrap().remove(0);
//! assert_eq!(dy.item().unwrap(), 12.0);
//! assert_eq!(d2y.item().unwrap(), 12.0);
//! ```

mod array;
pub mod check;
mod error;
pub mod functional;
mod op;
mod tensor;

pub use array::{numel, NdArray, Shape};
pub use check::{check_gradient, finite_difference_check, GradCheck, GradCheckReport};
pub use error::{Error, Result};
pub use op::{sigmoid, softplus, Op};
pub use tensor::{apply, grad, PauseGuard, Tape, Tensor};
