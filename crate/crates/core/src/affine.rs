//! Affine (scale plus zero-point) quantized multiplication, kept as a
//! reference point for what the symmetric scheme avoids.
//!
//! With `r = s (q - z)`, the product `r3 = r1 r2` requantized to `(s3, z3)`
//! expands to
//! `q3 = z3 + (s1 s2 / s3) [q1 q2 - q1 z2 - q2 z1 + z1 z2]`,
//! and with every zero-point at zero it collapses to `(s1 s2 / s3) q1 q2`.
//!
//! The routines are generic over any field, so they can be checked exactly
//! with rationals.

use std::ops::{Add, Div, Mul, Sub};

use num_traits::Zero;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<F> {
    pub s1: F,
    pub s2: F,
    pub s3: F,
    pub z1: F,
    pub z2: F,
    pub z3: F,
}

impl<F: Clone + PartialOrd + Zero> AffineParams<F> {
    pub fn new(s: [F; 3], z: [F; 3]) -> Result<Self> {
        if s.iter().any(|v| *v <= F::zero()) {
            return Err(Error::Contract("affine scales must be positive".into()));
        }
        let [s1, s2, s3] = s;
        let [z1, z2, z3] = z;
        Ok(AffineParams { s1, s2, s3, z1, z2, z3 })
    }
}

/// Real value represented by `q` under `(s, z)`.
pub fn dequantize<F>(q: F, s: F, z: F) -> F
where
    F: Sub<Output = F> + Mul<Output = F>,
{
    s * (q - z)
}

/// `(q3_full, q3_symmetric)`: the zero-point-aware product and the
/// zero-point-free shortcut.
pub fn affine_product_demo<F>(q1: F, q2: F, a: &AffineParams<F>) -> (F, F)
where
    F: Clone + Add<Output = F> + Sub<Output = F> + Mul<Output = F> + Div<Output = F>,
{
    let m = a.s1.clone() * a.s2.clone() / a.s3.clone();
    let cross = q1.clone() * q2.clone() - q1.clone() * a.z2.clone() - q2.clone() * a.z1.clone()
        + a.z1.clone() * a.z2.clone();
    let full = a.z3.clone() + m.clone() * cross;
    let symmetric = m * (q1 * q2);
    (full, symmetric)
}
