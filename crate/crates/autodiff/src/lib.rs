//! Dense `f64` tensors and a dynamic reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are registered
//! with [`Tape::param`] (trainable) or [`Tape::constant`] (frozen), every
//! operation appends one node, and [`Tape::backward`] consumes the tape and
//! returns [`Gradients`] for every node that depends on a trainable leaf.
//!
//! ```
//! use netresil_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
