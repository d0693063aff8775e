//! Exactly reversible multiplication of fixed-point words by a rational `n/d`.
//!
//! Dividing by `d` discards the remainder; those digits are pushed into a
//! per-element [`InfoBuffer`] (an unbounded natural number used as a base-`d`
//! stack). Multiplying by `n` leaves room for a digit in `[0, n)`, which is
//! popped back out of the buffer, so on average the buffer only grows by
//! `log2(d/n)` bits per call.
//!
//! The inverse is the same procedure with `n` and `d` exchanged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on ratio denominators.
pub const MAX_DENOMINATOR: u64 = 1 << 16;

/// A decay factor `n/d` in lowest terms with `0 < n <= d <= 2^16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    n: u64,
    d: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Ratio {
    pub const ONE: Ratio = Ratio { n: 1, d: 1 };

    /// Builds a ratio, reducing it to lowest terms.
    pub fn new(n: u64, d: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidRatio { n, d, reason: "numerator and denominator must be positive" });
        }
        if n > d {
            return Err(Error::InvalidRatio { n, d, reason: "ratio must not exceed 1" });
        }
        let g = gcd(n, d);
        let (n, d) = (n / g, d / g);
        if d > MAX_DENOMINATOR {
            return Err(Error::InvalidRatio { n, d, reason: "denominator exceeds 2^16" });
        }
        Ok(Self { n, d })
    }

    pub fn numer(self) -> u64 {
        self.n
    }

    pub fn denom(self) -> u64 {
        self.d
    }

    pub fn to_f64(self) -> f64 {
        self.n as f64 / self.d as f64
    }

    /// Entropy stored per multiplication, `log2(d/n)` bits.
    pub fn bits_per_step(self) -> f64 {
        (self.d as f64 / self.n as f64).log2()
    }

    /// Closest fraction to `x` with denominator at most `max_den`, for `x` in
    /// `(0, 1]`. Values at or below zero clamp to `1/max_den`.
    pub fn approximate(x: f64, max_den: u64) -> Self {
        let max_den = max_den.clamp(1, MAX_DENOMINATOR);
        if !(x > 0.0) {
            return Self { n: 1, d: max_den };
        }
        if x >= 1.0 {
            return Self::ONE;
        }
        // Walk the continued-fraction convergents until the denominator bound
        // is hit; the answer is that convergent or the best semiconvergent.
        let (mut p0, mut q0, mut p1, mut q1) = (0u64, 1u64, 1u64, 0u64);
        let mut frac = x;
        let mut candidates = vec![(1u64, max_den)];
        loop {
            let a_f = frac.floor();
            let a = if a_f >= 1e18 { u64::MAX } else { a_f as u64 };
            let q2 = a.saturating_mul(q1).saturating_add(q0);
            if q2 > max_den {
                let k = (max_den - q0).checked_div(q1).unwrap_or(0);
                candidates.push((k * p1 + p0, k * q1 + q0));
                candidates.push((p1, q1));
                break;
            }
            let p2 = a * p1 + p0;
            (p0, q0, p1, q1) = (p1, q1, p2, q2);
            let rem = frac - a_f;
            if rem <= 1e-15 {
                candidates.push((p1, q1));
                break;
            }
            frac = 1.0 / rem;
        }
        candidates
            .into_iter()
            .filter(|&(p, q)| p >= 1 && q >= p && q <= max_den)
            .min_by(|a, b| {
                let ea = (x - a.0 as f64 / a.1 as f64).abs();
                let eb = (x - b.0 as f64 / b.1 as f64).abs();
                ea.total_cmp(&eb).then(a.1.cmp(&b.1))
            })
            .and_then(|(p, q)| Ratio::new(p, q).ok())
            .unwrap_or(Ratio { n: 1, d: max_den })
    }

    /// Same ratio with numerator and denominator exchanged. Only meaningful
    /// as the inverse step, so it is not a public `Ratio`.
    fn inverted(self) -> (u64, u64) {
        (self.d, self.n)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.n, self.d)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("cannot parse ratio `{s}` (expected n/d)"));
        let (n, d) = s.trim().split_once('/').ok_or_else(bad)?;
        let n = n.trim().parse::<u64>().map_err(|_| bad())?;
        let d = d.trim().parse::<u64>().map_err(|_| bad())?;
        Ratio::new(n, d)
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

/// Unbounded natural number holding discarded digits, little-endian 64-bit limbs
/// with no trailing zero limbs (zero is the empty vector).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct InfoBuffer {
    limbs: Vec<u64>,
}

impl InfoBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_u64(x: u64) -> Self {
        let mut b = Self::new();
        b.mul_add_small(1, x);
        b
    }

    pub fn from_limbs(mut limbs: Vec<u64>) -> Self {
        while limbs.last() == Some(&0) {
            limbs.pop();
        }
        Self { limbs }
    }

    pub fn limbs(&self) -> &[u64] {
        &self.limbs
    }

    pub fn is_empty(&self) -> bool {
        self.limbs.is_empty()
    }

    pub fn bit_len(&self) -> u64 {
        match self.limbs.last() {
            None => 0,
            Some(&top) => 64 * (self.limbs.len() as u64 - 1) + (64 - top.leading_zeros() as u64),
        }
    }

    /// `self = self * m + a`
    #[inline]
    fn mul_add_small(&mut self, m: u64, a: u64) {
        let mut carry = a as u128;
        for limb in &mut self.limbs {
            let x = (*limb as u128) * (m as u128) + carry;
            *limb = x as u64;
            carry = x >> 64;
        }
        if carry != 0 {
            self.limbs.push(carry as u64);
        }
    }

    /// `self = self / m`, returning `self % m`.
    #[inline]
    fn div_rem_small(&mut self, m: u64) -> u64 {
        debug_assert!(m > 0);
        if m == 1 {
            return 0;
        }
        // m <= 2^16, so half-limb steps stay within u64 division.
        debug_assert!(m <= MAX_DENOMINATOR);
        let mut rem: u64 = 0;
        for limb in self.limbs.iter_mut().rev() {
            let hi = (rem << 32) | (*limb >> 32);
            let q_hi = hi / m;
            rem = hi % m;
            let lo = (rem << 32) | (*limb & 0xffff_ffff);
            let q_lo = lo / m;
            rem = lo % m;
            *limb = (q_hi << 32) | q_lo;
        }
        while self.limbs.last() == Some(&0) {
            self.limbs.pop();
        }
        rem
    }

    /// Information content `log2(value + 1)` in bits.
    pub fn bits_stored(&self) -> f64 {
        match self.limbs.len() {
            0 => 0.0,
            1 => (self.limbs[0] as f64 + 1.0).log2(),
            k => {
                let hi = self.limbs[k - 1] as f64 * 2f64.powi(64) + self.limbs[k - 2] as f64;
                hi.log2() + 64.0 * (k as f64 - 2.0)
            }
        }
    }

    /// Appends `u32 limb count` followed by the limbs, all little-endian.
    pub fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.limbs.len() as u32).to_le_bytes());
        for limb in &self.limbs {
            out.extend_from_slice(&limb.to_le_bytes());
        }
    }

    /// Reads one buffer written by [`write_le`](Self::write_le), advancing `input`.
    pub fn read_le(input: &mut &[u8]) -> Result<Self> {
        let count = u32::from_le_bytes(take::<4>(input)?) as usize;
        if input.len() < count * 8 {
            return Err(Error::Checkpoint(format!(
                "buffer declares {count} limbs but only {} bytes remain",
                input.len()
            )));
        }
        let limbs: Vec<u64> = (0..count).map(|_| u64::from_le_bytes(take::<8>(input).unwrap())).collect();
        if limbs.last() == Some(&0) {
            return Err(Error::Checkpoint("buffer has a non-canonical zero top limb".into()));
        }
        Ok(Self { limbs })
    }
}

pub(crate) fn take<const N: usize>(input: &mut &[u8]) -> Result<[u8; N]> {
    if input.len() < N {
        return Err(Error::Checkpoint(format!("needed {N} bytes, {} remain", input.len())));
    }
    let (head, rest) = input.split_at(N);
    *input = rest;
    Ok(head.try_into().unwrap())
}

/// One pass of "push remainder mod `den`, divide by `den`, multiply by `num`,
/// pop a digit below `num`", computed without overflow.
#[inline]
fn push_divide_multiply_pop(buf: &mut InfoBuffer, c: i64, num: u64, den: u64) -> i128 {
    if num == den {
        return c as i128;
    }
    let den_i = den as i64;
    buf.mul_add_small(den, c.rem_euclid(den_i) as u64);
    let q = c.div_euclid(den_i) as i128;
    let digit = buf.div_rem_small(num);
    q * num as i128 + digit as i128
}

/// Multiplies `c` by `r` in place, storing the information lost to rounding in `buf`.
///
/// The result differs from `c * n / d` by less than `n` units: its low digit
/// base `n` is popped from the buffer. It can only leave the 64-bit range
/// when `c` is within `d` of `i64::MIN`/`i64::MAX`; it then wraps.
#[inline]
pub fn rat_mul(buf: &mut InfoBuffer, c: &mut i64, r: Ratio) {
    *c = push_divide_multiply_pop(buf, *c, r.n, r.d) as i64;
}

/// Exact inverse of [`rat_mul`] with the same ratio.
///
/// Fails when the result would leave the 64-bit range, which cannot happen for
/// any state that `rat_mul` produced without wrapping.
#[inline]
pub fn rat_mul_inverse(buf: &mut InfoBuffer, c: &mut i64, r: Ratio) -> Result<()> {
    let (num, den) = r.inverted();
    let before = *c;
    let v = push_divide_multiply_pop(buf, before, num, den);
    *c = i64::try_from(v).map_err(|_| {
        Error::Integrity(format!("inverting multiplication by {r} overflows the 64-bit word for value {before}"))
    })?;
    Ok(())
}

/// Value-returning form of [`rat_mul`].
pub fn rat_mul_value(mut buf: InfoBuffer, mut c: i64, r: Ratio) -> (InfoBuffer, i64) {
    rat_mul(&mut buf, &mut c, r);
    (buf, c)
}

/// Value-returning form of [`rat_mul_inverse`].
pub fn rat_mul_inverse_value(mut buf: InfoBuffer, mut c: i64, r: Ratio) -> Result<(InfoBuffer, i64)> {
    rat_mul_inverse(&mut buf, &mut c, r)?;
    Ok((buf, c))
}

pub fn bits_stored(buf: &InfoBuffer) -> f64 {
    buf.bits_stored()
}
