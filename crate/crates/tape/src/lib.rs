//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! accumulates gradients into every tracked leaf.
//!
//! The tape is generic over the element type so the same model code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.

mod scalar;
mod tape;

pub mod ops;

pub use scalar::{lit, Scalar};
pub use tape::{Gradients, Tape, Var};
