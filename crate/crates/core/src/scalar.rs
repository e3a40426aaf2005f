//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// On-disk element encodings understood by the volume readers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    Float32,
    Float64,
    Uint8,
    Int16,
}

impl ElementType {
    pub fn byte_size(self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::Float64 => 8,
            ElementType::Uint8 => 1,
            ElementType::Int16 => 2,
        }
    }

    /// Decode one little-endian element to f64.
    pub(crate) fn decode_le(self, bytes: &[u8]) -> f64 {
        match self {
            ElementType::Float32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ElementType::Float64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
            ElementType::Uint8 => bytes[0] as f64,
            ElementType::Int16 => i16::from_le_bytes(bytes[..2].try_into().unwrap()) as f64,
        }
    }
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for f32 {}
    impl Sealed for f64 {}
}

/// Floating point type the registration engine can run on.
///
/// Implemented for `f32` and `f64`. Gradient checks and the bit-exact
/// invariants are stated for `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + sealed::Sealed
{
    const ELEMENT: ElementType;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {
    const ELEMENT: ElementType = ElementType::Float32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const ELEMENT: ElementType = ElementType::Float64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Compensated (Neumaier) summation. Sequential, so the result depends only
/// on the input order.
pub fn neumaier_sum<T: Real, I: IntoIterator<Item = T>>(values: I) -> T {
    let mut sum = T::zero();
    let mut comp = T::zero();
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[inline]
pub(crate) fn dot3<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm3<T: Real>(a: [T; 3]) -> T {
    dot3(a, a).sqrt()
}

/// Element of a grid that can be linearly combined: a scalar or a 3-vector.
pub(crate) trait Lane<T: Real>: Copy + Send + Sync {
    fn zero() -> Self;
    /// `self + w * x`
    fn axpy(self, w: T, x: Self) -> Self;
}

impl<T: Real> Lane<T> for T {
    #[inline]
    fn zero() -> Self {
        T::zero()
    }
    #[inline]
    fn axpy(self, w: T, x: Self) -> Self {
        self + w * x
    }
}

impl<T: Real> Lane<T> for [T; 3] {
    #[inline]
    fn zero() -> Self {
        [T::zero(); 3]
    }
    #[inline]
    fn axpy(self, w: T, x: Self) -> Self {
        [self[0] + w * x[0], self[1] + w * x[1], self[2] + w * x[2]]
    }
}
