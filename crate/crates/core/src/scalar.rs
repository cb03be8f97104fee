//! Scalar abstraction shared by the numeric parts of the engine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Floating point type usable for scores and embedding components.
///
/// Implemented for `f32` and `f64`. Rank fusion, BM25 scoring and the flat
/// vector store are written against this trait; the crate root exports the
/// concrete aliases used by the pipeline.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumCast + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Convert a literal or a value of another scalar type, panicking only if
    /// the value is unrepresentable (never the case between f32 and f64).
    fn of<T: ToPrimitive>(value: T) -> Self {
        <Self as NumCast>::from(value).expect("scalar conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Total order for scores: descending by value, NaN treated as smallest.
pub(crate) fn cmp_desc<F: Scalar>(a: F, b: F) -> std::cmp::Ordering {
    match b.partial_cmp(&a) {
        Some(ord) => ord,
        None => a.is_nan().cmp(&b.is_nan()),
    }
}

/// Round half away from zero (half-up for the non-negative metrics reported here).
///
/// The magnitude is nudged by a few ulps first so decimal ties such as `0.725`,
/// stored as `0.72499999...`, still round up.
pub fn round_half_up<F: Scalar>(value: F, decimals: u32) -> F {
    let factor = F::of(10u64.pow(decimals));
    let scaled = value.abs() * factor * (F::one() + F::epsilon() * F::of(4));
    let rounded = (scaled + F::of(0.5)).floor() / factor;
    if value.is_sign_negative() {
        -rounded
    } else {
        rounded
    }
}
