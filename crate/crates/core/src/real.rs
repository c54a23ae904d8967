//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar used by the kinetics, LP kernel, estimation and planning code.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// True for types with roughly double precision.
    #[inline]
    fn is_double() -> bool {
        Self::epsilon() < Self::lit(1e-12)
    }
}

impl Real for f32 {}
impl Real for f64 {}
