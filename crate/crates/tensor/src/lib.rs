//! Dense row-major tensors and a Wengert-style tape for reverse-mode
//! differentiation.
//!
//! Everything is generic over [`Real`] so the same model code can run in
//! `f32` for training and in `f64` for finite-difference gradient checks.
//!
//! ```
//! use uniadapter_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.variable(Tensor::from_vec(vec![2], vec![1.0, -3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -6.0]);
//! ```

mod error;
mod kernels;
pub mod numeric;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use real::Real;
pub use tape::{Gradients, OpKind, Segment, Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the models.
pub const LAYER_NORM_EPS: f64 = 1e-5;
