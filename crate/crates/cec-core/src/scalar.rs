//! Scalar abstraction so every layer runs in either f32 or f64.
//!
//! f64 is the default everywhere (gradient checks are only meaningful
//! there); f32 is a runtime switch selected at the configuration boundary.

use std::fmt::{Debug, Display};

/// Floating-point element type of all tensors.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from an f64 constant.
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }
    /// Widen to f64 for reporting and serialization.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
