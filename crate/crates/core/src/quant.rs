//! The power-of-2 symmetric quantizer with trained log-thresholds, and the
//! clipped-gradient FakeQuant baseline.
//!
//! Forward: `q(x) = clip(round(x / s), n, p) · s` with
//! `s = 2^ceil(log2 t) / 2^(b-1)` (signed) or `/ 2^b` (unsigned).
//!
//! Backward (per element, times upstream):
//!
//! | region                    | d/dx | d/d(log2 t)                 |
//! |---------------------------|------|-----------------------------|
//! | `n <= round(x/s) <= p`    | 1    | `s ln2 (round(x/s) - x/s)`  |
//! | `round(x/s) < n`          | 0    | `s ln2 n`                   |
//! | `round(x/s) > p`          | 0    | `s ln2 p`                   |

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Round half to even on any real type.
#[inline]
pub fn round_half_even<T: Real>(v: T) -> T {
    let f = v.floor();
    let d = v - f;
    let half = T::lit(0.5);
    if d < half {
        f
    } else if d > half {
        f + T::one()
    } else if (f * half).floor() == f * half {
        f
    } else {
        f + T::one()
    }
}

/// Banker's rounding to an integer. Requires `|x| < 2^62`.
pub fn bankers_round(x: f64) -> i64 {
    debug_assert!(x.abs() < 2f64.powi(62));
    round_half_even(x) as i64
}

/// Bit-width, signedness and trained log2-threshold of one quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerParams<T> {
    pub bits: u32,
    pub signed: bool,
    pub log2_t: T,
}

impl<T: Real> QuantizerParams<T> {
    pub fn new(bits: u32, signed: bool, log2_t: T) -> Result<Self> {
        if !(2..=24).contains(&bits) {
            return Err(Error::Contract(format!("bit-width {bits} outside [2, 24]")));
        }
        if !log2_t.is_finite() || log2_t.abs() > T::lit(1e6) {
            return Err(Error::Contract(format!("log2 threshold {log2_t} not usable")));
        }
        Ok(QuantizerParams { bits, signed, log2_t })
    }

    pub fn from_threshold(bits: u32, signed: bool, t: T) -> Result<Self> {
        if !(t > T::zero()) {
            return Err(Error::Contract(format!("threshold {t} must be positive")));
        }
        Self::new(bits, signed, t.log2())
    }

    pub fn threshold(&self) -> T {
        self.log2_t.exp2()
    }

    /// Exponent of the level count: `b - 1` when signed, `b` otherwise.
    fn level_bits(&self) -> i32 {
        self.bits as i32 - i32::from(self.signed)
    }

    /// Integer clip limits `(n, p)`.
    pub fn limits(&self) -> (i64, i64) {
        if self.signed {
            (-(1i64 << (self.bits - 1)), (1i64 << (self.bits - 1)) - 1)
        } else {
            (0, (1i64 << self.bits) - 1)
        }
    }

    pub fn limits_real(&self) -> (T, T) {
        let (n, p) = self.limits();
        (T::lit(n as f64), T::lit(p as f64))
    }

    /// Fractional length `f` with `s = 2^-f`.
    pub fn frac_len(&self) -> i32 {
        let c = self.log2_t.ceil().to_i32().expect("log2_t bounded at construction");
        self.level_bits() - c
    }

    /// Scale factor and fractional length, `s = 2^-f` exactly.
    pub fn scale(&self) -> (T, i32) {
        let f = self.frac_len();
        (T::exp2i(-f), f)
    }
}

/// `clip(round(x/s), n, p) · s`, elementwise.
pub fn quantize_forward<T: Real>(x: &Tensor<T>, q: &QuantizerParams<T>) -> Tensor<T> {
    let (s, _) = q.scale();
    let (n, p) = q.limits_real();
    x.map(|v| round_half_even(v / s).max(n).min(p) * s)
}

/// Grid integers `clip(round(x/s), n, p)`.
pub fn quantize_levels<T: Real>(x: &Tensor<T>, q: &QuantizerParams<T>) -> Vec<i64> {
    let (s, _) = q.scale();
    let (n, p) = q.limits();
    x.data()
        .iter()
        .map(|&v| {
            let r = round_half_even(v / s).to_f64_lossy();
            (r.clamp(n as f64, p as f64)) as i64
        })
        .collect()
}

/// Local gradients of the quantizer, chained with `upstream`.
///
/// Returns `(grad_x, grad_log2_t)` with `grad_log2_t` summed over all
/// elements. The arithmetic is laid out so that it reproduces, operation for
/// operation, what the tape computes for [`quantize_unfused`].
pub fn quantize_backward<T: Real>(
    x: &Tensor<T>,
    q: &QuantizerParams<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, T)> {
    x.expect_shape(upstream.shape(), "quantize_backward")?;
    let (s, _) = q.scale();
    let (n, p) = q.limits_real();
    let mut gx = Vec::with_capacity(x.len());
    let mut contrib = Vec::with_capacity(x.len());
    for (&v, &g) in x.data().iter().zip(upstream.data()) {
        let xs = v / s;
        let r = round_half_even(xs);
        if r < n {
            gx.push(T::zero());
            contrib.push(g * n);
        } else if r > p {
            gx.push(T::zero());
            contrib.push(g * p);
        } else {
            gx.push(g);
            contrib.push(g * r + -(g * v / s));
        }
    }
    let grad_s = Tensor::new(x.shape().to_vec(), contrib)?.sum();
    let grad_log2_t = grad_s * (s * T::LN_2());
    Ok((Tensor::new(x.shape().to_vec(), gx)?, grad_log2_t))
}

/// The quantizer as a single tape node with inputs `x` and a one-element
/// `log2_t`.
pub fn quantize_fused<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    log2_t: Var,
    bits: u32,
    signed: bool,
) -> Result<Var> {
    let q = QuantizerParams::new(bits, signed, tape.value(log2_t).item())?;
    let y = quantize_forward(tape.value(x), &q);
    Ok(tape.custom(&[x, log2_t], y, move |ctx| {
        let q = QuantizerParams {
            bits,
            signed,
            log2_t: ctx.inputs[1].item(),
        };
        let (gx, gt) = quantize_backward(ctx.inputs[0], &q, ctx.upstream)?;
        Ok(vec![Some(gx), Some(Tensor::new(ctx.inputs[1].shape().to_vec(), vec![gt])?)])
    }))
}

/// The same quantizer composed from primitives, with straight-through
/// rounding built as `v + stop_gradient(round(v) - v)`.
pub fn quantize_unfused<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    log2_t: Var,
    bits: u32,
    signed: bool,
) -> Result<Var> {
    let q = QuantizerParams::new(bits, signed, tape.value(log2_t).item())?;
    let (n, p) = q.limits_real();

    let c = tape.ceil(log2_t);
    let dc = tape.sub(c, log2_t)?;
    let dc = tape.stop_gradient(dc);
    let ceil_ste = tape.add(log2_t, dc)?;
    let e = tape.add_const(ceil_ste, -T::lit(q.level_bits() as f64));
    let s = tape.exp2(e);
    let shape = tape.value(x).shape().to_vec();
    let s_full = tape.broadcast(s, &shape)?;

    let xs = tape.div(x, s_full)?;
    let r = tape.round(xs);
    let dr = tape.sub(r, xs)?;
    let dr = tape.stop_gradient(dr);
    let round_ste = tape.add(xs, dr)?;
    let clipped = tape.clip(round_ste, n, p);
    tape.mul(clipped, s_full)
}

/// Forward output and local gradients of the clipped-gradient baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuantLocal<T> {
    pub y: Tensor<T>,
    pub grad_n: Tensor<T>,
    pub grad_p: Tensor<T>,
    pub grad_x: Tensor<T>,
}

/// FakeQuant with free real limits `(n, p)` and no zero-point nudging:
/// `round((clip(x, n, p) - n) / d) · d + n` with `d = (p - n) / (2^b - 1)`.
/// The backward pass treats rounding as identity, so the limit gradients
/// are those of the clip function.
pub fn fakequant_clipped<T: Real>(x: &Tensor<T>, n: T, p: T, bits: u32) -> Result<FakeQuantLocal<T>> {
    if !(n < p) {
        return Err(Error::Contract(format!("fakequant limits need n < p, got ({n}, {p})")));
    }
    let d = (p - n) / T::lit(((1u64 << bits) - 1) as f64);
    let y = x.map(|v| round_half_even((v.max(n).min(p) - n) / d) * d + n);
    let grad_n = x.map(|v| if v < n { T::one() } else { T::zero() });
    let grad_p = x.map(|v| if v > p { T::one() } else { T::zero() });
    let grad_x = x.map(|v| if v >= n && v <= p { T::one() } else { T::zero() });
    Ok(FakeQuantLocal { y, grad_n, grad_p, grad_x })
}
