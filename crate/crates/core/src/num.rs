//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar the numeric modules are generic over.
///
/// `f32` and `f64` both satisfy the bound; [`crate::Real`] picks the
/// default used by the CLI and the acceptance suite.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Sum + Display + Debug + Send + Sync + 'static
{
    /// Conversion from `f64` literals and counts.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion from f64")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar conversion to f64")
    }
}

impl<T> Scalar for T where
    T: Float + NumAssign + FromPrimitive + Sum + Display + Debug + Send + Sync + 'static
{
}
