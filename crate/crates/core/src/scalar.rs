use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating point type used for log-probabilities: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn of(value: f64) -> Self {
        Self::from_f64(value).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance on `sum(exp(entries)) == 1` for a full distribution of `len` entries.
    fn normalization_tolerance(len: usize) -> Self {
        let rounding = Self::epsilon() * Self::of(8.0 * len.max(1) as f64);
        rounding.max(Self::of(1e-6))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
