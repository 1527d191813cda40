//! Differentiable operations, grouped by kind. All ops are methods on [`Var`].
//!
//! [`Var`]: crate::Var

mod conv;
mod elementwise;
mod linalg;
mod nn;
mod shape;

pub use nn::BatchStats;

use ndarray::ArrayD;

use crate::Scalar;

#[inline]
pub(crate) fn flat<T: Scalar>(a: &ArrayD<T>) -> &[T] {
    a.as_slice().expect("tape values are kept in standard layout")
}

#[inline]
pub(crate) fn from_vec<T: Scalar>(shape: &[usize], data: Vec<T>) -> ArrayD<T> {
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape matches data length")
}
