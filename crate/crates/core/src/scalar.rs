use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type the engine is generic over.
///
/// Everything numerically sensitive in this crate (finite-difference
/// oracles, the closed-form references) is exercised with `f64`; `f32`
/// compiles and runs but has no precision guarantees attached.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Infallible for the supported float types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Little-endian bytes of the value widened to `f64`.
    fn to_le_f64_bytes(self) -> [u8; 8] {
        self.as_f64().to_le_bytes()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
