//! Scalar abstraction shared by the tensor core, the DSP routines and the model.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, NumAssign};

/// Real number type the numeric core is generic over.
///
/// Implemented for `f32` and `f64`. Training runs in `f64`; `f32` is used for
/// compact checkpoint and spectrogram storage.
pub trait Scalar:
    Float + FloatConst + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Checkpoint dtype tag (0 = f32, 1 = f64).
    const DTYPE: u8;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
