//! Scalar abstraction for the numerical core.
//!
//! Everything under [`crate::nncore`], [`crate::gcn`], [`crate::informer`]
//! and [`crate::trainer`] is generic over [`Scalar`] so the same code runs
//! in 64-bit (tests, gradient checking) and 32-bit (training) precision.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the numerical core is generic over.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Type tag written into checkpoints ("f32" or "f64").
    const NAME: &'static str;

    /// Lossy conversion from `f64`; exact for `f64`, rounded for `f32`.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    /// Widening conversion to `f64`; exact for both `f32` and `f64`.
    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}
