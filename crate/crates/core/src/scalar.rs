//! Scalar abstraction for the exact engines.
//!
//! The tree, verifier, and construction modules are generic over the scalar
//! type so that the same exact machinery runs in `f32` or `f64`. The Monte
//! Carlo engine is `f64`-only, since its tolerances are meaningless in single
//! precision.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the exact engines.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Absolute tolerance for exact-engine comparisons.
    ///
    /// Trees are tiny, so accumulated rounding error stays far below this.
    fn exact_tol() -> Self;

    /// Lossy conversion from `f64` for literals and config values.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }
}

impl Real for f64 {
    fn exact_tol() -> f64 {
        1e-12
    }
}

impl Real for f32 {
    fn exact_tol() -> f32 {
        1e-5
    }
}
