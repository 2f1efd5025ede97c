//! Floating-point scalar abstraction: `f32` or `f64`.

use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar type every numeric module is generic over.
///
/// `f32` is the training default; `f64` is the verification mode used by
/// gradient checking, where central differences need the extra precision.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Container dtype tag ("f32" / "f64").
    const DTYPE: &'static str;
    /// Bytes per element in the checkpoint payload.
    const BYTE_LEN: usize;

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Little-endian decode of one element.
    fn read_le(bytes: &[u8]) -> Self;
    /// Little-endian encode of one element.
    fn write_le(self, out: &mut Vec<u8>);

    /// Hyperbolic tangent at training precision: `f32` uses a clamped Padé
    /// rational (max abs error < 1e-4, branch-free); `f64` stays exact so
    /// verification runs check the true formula.
    fn tanh_approx(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_LEN: usize = 4;

    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    #[inline]
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    #[inline]
    fn tanh_approx(self) -> Self {
        // Padé(7,6) of tanh, inputs clamped where the rational would leave
        // [-1, 1].
        let x = self.clamp(-4.97, 4.97);
        let x2 = x * x;
        let p = x * (135135.0 + x2 * (17325.0 + x2 * (378.0 + x2)));
        let q = 135135.0 + x2 * (62370.0 + x2 * (3150.0 + 28.0 * x2));
        p / q
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_LEN: usize = 8;

    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    #[inline]
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    #[inline]
    fn tanh_approx(self) -> Self {
        self.tanh()
    }
}
