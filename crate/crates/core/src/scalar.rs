//! Scalar abstractions shared by the numeric modules.
//!
//! [`Real`] is the ordered-field surface needed by exact algorithms (the L1
//! line and breakpoint search work unchanged over `f64` and `BigRational`).
//! [`Float`] adds the transcendental operations used by least squares,
//! logistic scoring and the like.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{FromPrimitive, Num, Signed, ToPrimitive};

pub use num::BigRational;

pub trait Real: Num + Signed + PartialOrd + Clone + FromPrimitive + ToPrimitive + Debug {
    fn two() -> Self {
        Self::one() + Self::one()
    }

    /// Lossy conversion for reporting; exact types round to nearest.
    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where T: Num + Signed + PartialOrd + Clone + FromPrimitive + ToPrimitive + Debug {}

pub trait Float:
    Real
    + num_traits::Float
    + Copy
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + std::fmt::Display
    + 'static
{
}

impl Float for f32 {}
impl Float for f64 {}

/// Cast from f64, panicking only for types that cannot represent finite
/// doubles (none of the supported scalars).
pub(crate) fn cast<T: FromPrimitive>(v: f64) -> T {
    T::from_f64(v).expect("scalar type cannot represent f64 value")
}
