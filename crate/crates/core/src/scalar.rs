//! Scalar abstraction for the numeric core.
//!
//! Everything downstream of graph construction works for any IEEE float
//! wide enough to hold the constants involved. The trait collects the
//! bounds the modules need so signatures stay short.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant (tolerance, rate, literal) into `Self`.
    ///
    /// Panics if the value is not representable, which cannot happen for
    /// the finite constants this crate uses.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant must convert")
    }

    /// Lossy view of the value as `f64`, for reports and diagnostics.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + ScalarOperand
        + Sum
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}
