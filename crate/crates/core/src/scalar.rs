use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Numeric precision of a tensor's scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// 32-bit reals, used for training.
    Standard,
    /// 64-bit reals, used for gradient checks and oracles.
    Wide,
}

/// Real scalar type carried by [`crate::Tensor`].
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    #[inline]
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// `exp` through `libm`, independent of which float backend `num-traits` uses.
    fn exp_m(self) -> Self;

    /// `tanh` through `libm`.
    fn tanh_m(self) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Standard;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn exp_m(self) -> Self {
        libm::expf(self)
    }

    #[inline]
    fn tanh_m(self) -> Self {
        libm::tanhf(self)
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Wide;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn exp_m(self) -> Self {
        libm::exp(self)
    }

    #[inline]
    fn tanh_m(self) -> Self {
        libm::tanh(self)
    }
}
