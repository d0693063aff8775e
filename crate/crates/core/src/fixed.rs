//! Signed 64-bit fixed-point numbers with a run-wide radix point.
//!
//! Addition and subtraction wrap modulo 2^64, so `(a + b) - b == a` holds for
//! every pair of raw words. That group structure is what makes the position and
//! velocity updates of training exactly invertible.

use crate::error::{Error, Result};

/// Fractional bits used unless a run configures otherwise.
pub const DEFAULT_FRAC_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedScalar {
    raw: i64,
    frac_bits: u32,
}

impl FixedScalar {
    pub fn from_raw(raw: i64, frac_bits: u32) -> Self {
        debug_assert!(frac_bits < 63);
        Self { raw, frac_bits }
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    pub fn to_f64(self) -> f64 {
        dequantize(self)
    }
}

/// Largest magnitude (exclusive) representable with `frac_bits` fractional bits.
pub fn range_limit(frac_bits: u32) -> f64 {
    (2.0f64).powi(63 - frac_bits as i32)
}

/// Rounds `x * 2^frac_bits` to the nearest integer, ties to even.
pub fn quantize(x: f64, frac_bits: u32) -> Result<FixedScalar> {
    Ok(FixedScalar { raw: quantize_raw(x, frac_bits)?, frac_bits })
}

#[inline]
pub(crate) fn quantize_raw(x: f64, frac_bits: u32) -> Result<i64> {
    // Scaling by a power of two is exact, so the only rounding is the final one.
    let scaled = x * (2.0f64).powi(frac_bits as i32);
    // !(a < b) also rejects NaN.
    if !(scaled.abs() < 2f64.powi(63)) {
        return Err(Error::Range { value: x, frac_bits });
    }
    Ok(scaled.round_ties_even() as i64)
}

pub fn dequantize(f: FixedScalar) -> f64 {
    dequantize_raw(f.raw, f.frac_bits)
}

#[inline]
pub(crate) fn dequantize_raw(raw: i64, frac_bits: u32) -> f64 {
    raw as f64 * (2.0f64).powi(-(frac_bits as i32))
}

/// A vector of fixed-point words sharing one radix point. Its length never
/// changes after construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FixedVec {
    raw: Vec<i64>,
    frac_bits: u32,
}

impl FixedVec {
    pub fn zeros(len: usize, frac_bits: u32) -> Self {
        Self { raw: vec![0; len], frac_bits }
    }

    pub fn from_raw(raw: Vec<i64>, frac_bits: u32) -> Self {
        Self { raw, frac_bits }
    }

    pub fn quantize(xs: &[f64], frac_bits: u32) -> Result<Self> {
        let raw = xs.iter().map(|&x| quantize_raw(x, frac_bits)).collect::<Result<_>>()?;
        Ok(Self { raw, frac_bits })
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| dequantize_raw(r, self.frac_bits)).collect()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn get(&self, i: usize) -> FixedScalar {
        FixedScalar { raw: self.raw[i], frac_bits: self.frac_bits }
    }

    pub fn as_raw(&self) -> &[i64] {
        &self.raw
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [i64] {
        &mut self.raw
    }

    fn check_compatible(&self, other: &FixedVec) -> Result<()> {
        if self.raw.len() != other.raw.len() || self.frac_bits != other.frac_bits {
            return Err(Error::Shape(format!(
                "fixed vectors of len {} ({} frac bits) and len {} ({} frac bits)",
                self.raw.len(),
                self.frac_bits,
                other.raw.len(),
                other.frac_bits
            )));
        }
        Ok(())
    }

    pub fn exact_add(&self, other: &FixedVec) -> Result<FixedVec> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn exact_sub(&self, other: &FixedVec) -> Result<FixedVec> {
        let mut out = self.clone();
        out.sub_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &FixedVec) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.raw.iter_mut().zip(&other.raw) {
            *a = a.wrapping_add(*b);
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &FixedVec) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.raw.iter_mut().zip(&other.raw) {
            *a = a.wrapping_sub(*b);
        }
        Ok(())
    }
}

pub fn exact_add(a: &FixedVec, b: &FixedVec) -> Result<FixedVec> {
    a.exact_add(b)
}

pub fn exact_sub(a: &FixedVec, b: &FixedVec) -> Result<FixedVec> {
    a.exact_sub(b)
}
