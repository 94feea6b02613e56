//! Fixed-point tensors and the shift-based requantizer.

use tqt_core::quant::round_half_even;
use tqt_core::{IntTensor, Tensor64};

use crate::error::{Result, RuntimeError};

/// Width used for accumulators and intermediate values that have not been
/// requantized to a narrower type.
pub const ACC_BITS: u32 = 32;

/// Representable integer range for a bit-width and signedness.
pub fn int_limits(bits: u32, signed: bool) -> (i64, i64) {
    if signed {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

/// `x / 2^shift` rounded half-to-even; a negative shift multiplies by
/// `2^-shift`. Computed in 128 bits, so it cannot overflow for 64-bit `x`
/// and shifts in `[-64, 127]`.
pub fn shift_round(x: i64, shift: i32) -> i128 {
    let x = x as i128;
    if shift <= 0 {
        return x << (-shift).min(64);
    }
    let shift = shift.min(126);
    let q = x >> shift;
    let r = x - (q << shift);
    let half = 1i128 << (shift - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Banker's-rounded right shift (left shift for negative `shift`), then
/// saturation to `bits`.
pub fn shift_requant(x: i64, shift: i32, bits: u32, signed: bool) -> i64 {
    let (n, p) = int_limits(bits, signed);
    shift_round(x, shift).clamp(n as i128, p as i128) as i64
}

/// Integer payload with fractional length `f`: element `k` stands for the
/// real value `k · 2^-f`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointTensor {
    pub data: IntTensor,
    pub f: i32,
    pub bits: u32,
    pub signed: bool,
}

impl FixedPointTensor {
    pub fn new(data: IntTensor, f: i32, bits: u32, signed: bool) -> Result<Self> {
        if !(2..=ACC_BITS).contains(&bits) {
            return Err(RuntimeError::invalid("<tensor>", format!("bit-width {bits} outside [2, 32]")));
        }
        let (n, p) = int_limits(bits, signed);
        if let Some(&v) = data.data().iter().find(|&&v| (v as i64) < n || (v as i64) > p) {
            return Err(RuntimeError::Range {
                value: v as i64,
                bits,
                signed,
            });
        }
        Ok(FixedPointTensor { data, f, bits, signed })
    }

    /// Rounds real values onto the grid `2^-f` with saturation. This is the
    /// boundary where real data enters the integer path.
    pub fn quantize(x: &Tensor64, f: i32, bits: u32, signed: bool) -> Result<Self> {
        let (n, p) = int_limits(bits, signed);
        let scale = (f as f64).exp2();
        let data = x.map(|v| round_half_even(v * scale).clamp(n as f64, p as f64) as i32);
        Self::new(data, f, bits, signed)
    }

    /// Real values `k · 2^-f`, for reporting.
    pub fn to_real(&self) -> Tensor64 {
        let s = (-self.f as f64).exp2();
        self.data.map(|k| k as f64 * s)
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tqt_core::quant::bankers_round;

    #[test]
    fn requant_examples() {
        assert_eq!(shift_requant(10, 2, 16, true), 2);
        assert_eq!(shift_requant(12, 2, 16, true), 3);
        assert_eq!(shift_requant(14, 2, 16, true), 4);
        assert_eq!(shift_requant(-10, 2, 16, true), -2);
        assert_eq!(shift_requant(-6, 2, 16, true), -2);
        assert_eq!(shift_requant(200, 0, 8, true), 127);
        assert_eq!(shift_requant(-200, 0, 8, false), 0);
        assert_eq!(shift_requant(3, -4, 8, true), 48);
        assert_eq!(shift_requant(9, -4, 8, true), 127);
    }

    #[test]
    fn huge_shifts_round_to_zero_or_even() {
        assert_eq!(shift_round(i64::MAX, 64), 0);
        assert_eq!(shift_round(i64::MIN, 64), 0);
        assert_eq!(shift_round(i64::MIN, 63), -1);
        assert_eq!(shift_round(-1, 200), 0);
    }

    #[test]
    fn quantize_rejects_nothing_and_saturates() {
        let x = Tensor64::from_vec(vec![0.3, -5.0, 1.0, 0.125]);
        let q = FixedPointTensor::quantize(&x, 3, 4, true).unwrap();
        assert_eq!(q.data.data(), &[2, -8, 7, 1]);
        assert_eq!(q.to_real().data(), &[0.25, -1.0, 0.875, 0.125]);
        let bad = IntTensor::from_vec(vec![300]);
        assert!(matches!(
            FixedPointTensor::new(bad, 0, 8, true),
            Err(RuntimeError::Range { value: 300, .. })
        ));
    }

    proptest! {
        #[test]
        fn shift_matches_bankers_division(x in -(1i64 << 30)..(1i64 << 30), k in 0i32..=16) {
            let expect = bankers_round(x as f64 / (k as f64).exp2());
            prop_assert_eq!(shift_requant(x, k, 32, true), expect);
        }

        #[test]
        fn left_shift_is_exact(x in -(1i64 << 20)..(1i64 << 20), k in 0i32..=10) {
            prop_assert_eq!(shift_requant(x, -k, 32, true), x << k);
        }
    }
}
