use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar used by every numerical routine in the crate: `f32` or `f64`.
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
    /// Lossy conversion from `f64`, used for constants and sampled values.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 representable in scalar type")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Euclidean norm of `a - b`.
pub fn l2_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<S>()
        .sqrt()
}

pub fn l2_norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}
