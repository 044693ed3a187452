//! Dense-tensor math with reverse-mode automatic differentiation.
//!
//! Everything downstream (feature extraction, causal fusion, the caption
//! decoder) runs on [`Tensor`]. Values are 64-bit floats throughout so that
//! finite-difference gradient checks are meaningful and reports are
//! reproducible bit-for-bit.
//!
//! Tensors are immutable after creation; only leaf parameters are mutated,
//! and only by the optimizer between graphs. A fresh graph is built on every
//! forward pass.

mod tensor;
mod ops;
mod optim;
mod gradcheck;

pub use ops::{kl_divergence, layer_norm};
pub use tensor::{Tensor, TensorError};
pub use optim::{Parameter, Sgd};
pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
