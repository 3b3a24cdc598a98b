//! Scalar abstraction for the numeric kernels.
//!
//! Peer averaging, the synthetic estimator, and the error/bias formulas are
//! written against [`Scalar`] so they work at f32 or f64 precision. The
//! transcript pipeline pins [`crate::Value`] (f64); f32 instantiations are
//! exercised in tests.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Display + Copy + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + Sum + Debug + Display + Copy + Send + Sync + 'static
{
}

/// Converts an f64 constant into the working scalar type.
pub fn cast<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("finite f64 converts to any Scalar")
}

/// Arithmetic mean; `None` on an empty slice.
pub fn mean<S: Scalar>(values: &[S]) -> Option<S> {
    if values.is_empty() {
        return None;
    }
    let sum: S = values.iter().copied().sum();
    Some(sum / cast(values.len() as f64))
}
