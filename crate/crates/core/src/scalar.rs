//! Floating point scalar abstraction shared by the numeric parts of the crate.

use std::fmt::{Debug, Display};

use num_traits as nt;

/// Floating point type usable for tensors, confidences, box geometry and statistics.
pub trait Scalar:
    nt::Float + nt::FromPrimitive + nt::ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Width in bytes of one element when serialized.
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as nt::FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        nt::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn from_byte(v: u8) -> Self {
        Self::from_f64_lossy(f64::from(v))
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_f64_lossy(v as f64)
    }

    fn to_le_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn to_le_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn to_le_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Scalar>(v: S) -> S {
        S::from_le_slice(&v.to_le_vec())
    }

    #[test]
    fn le_roundtrip() {
        assert_eq!(roundtrip(1.25f32), 1.25);
        assert_eq!(roundtrip(-3.5e100f64), -3.5e100);
        assert_eq!(<f32 as Scalar>::from_byte(255), 255.0);
    }
}
