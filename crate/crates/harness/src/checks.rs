//! Numerical checks of the quantizer gradients.
//!
//! The quantizer is piecewise constant, so finite differences of its
//! forward pass are zero or unbounded. The checks below difference a
//! surrogate instead: the rounding residuals `round(x/s) - x/s` and
//! `ceil(l) - l` are frozen at the evaluation point, which turns the
//! straight-through estimator into an ordinary derivative.

use tqt_core::quant::{fakequant_clipped, quantize_backward, round_half_even};
use tqt_core::{Quantizer64, Rng, Tensor64};

use crate::error::Result;

/// Points closer than this to a rounding tie, a ceiling jump or a clipping
/// limit (in grid units) are skipped.
pub const MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub points: usize,
    /// Candidate points rejected for lying near a discontinuity.
    pub skipped: usize,
    pub max_rel_err_x: f64,
    pub max_rel_err_log2_t: f64,
}

/// The quantizer with rounding offsets frozen at `(x0, l0)`, evaluated at
/// `(x, l)`.
fn surrogate(x: f64, l: f64, x0: f64, l0: f64, bits: u32, signed: bool) -> f64 {
    let q0 = Quantizer64::new(bits, signed, l0).expect("valid quantizer");
    let (s0, _) = q0.scale();
    let level_bits = (bits - u32::from(signed)) as f64;
    let dc = l0.ceil() - l0;
    let dr = round_half_even(x0 / s0) - x0 / s0;
    let (n, p) = q0.limits_real();
    let s = (l + dc - level_bits).exp2();
    (x / s + dr).clamp(n, p) * s
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-300 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares the analytic gradients of the quantizer with central
/// differences of the frozen-residual surrogate at `points` random
/// points. Bit-widths cycle through 3, 4 and 8, signedness alternates,
/// `log2 t` is uniform in `[-4, 4]` and `x` is uniform over one and a half
/// times the representable range, so both the inner and the clipped
/// regions are exercised.
pub fn quantizer_gradcheck(rng: &mut Rng, points: usize, step: f64) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        points: 0,
        skipped: 0,
        max_rel_err_x: 0.0,
        max_rel_err_log2_t: 0.0,
    };
    let widths = [3u32, 4, 8];
    while report.points < points {
        let bits = widths[report.points % 3];
        let signed = (report.points / 3).is_multiple_of(2);
        let l0 = rng.uniform_range(-4.0, 4.0);
        let q = Quantizer64::new(bits, signed, l0)?;
        let (s, _) = q.scale();
        let (n, p) = q.limits_real();
        let t = q.threshold();
        let x0 = if signed {
            rng.uniform_range(-1.5 * t, 1.5 * t)
        } else {
            rng.uniform_range(-0.5 * t, 1.5 * t)
        };
        let u = x0 / s;
        let near_tie = ((u - u.floor()) - 0.5).abs() < MARGIN;
        let near_ceil = (l0 - l0.round()).abs() < MARGIN;
        // A rounded value sitting exactly on a limit puts the clip kink at
        // the evaluation point.
        let r = round_half_even(u);
        let near_clip = r == n || r == p;
        if near_tie || near_ceil || near_clip {
            report.skipped += 1;
            continue;
        }
        let (gx, gl) = quantize_backward(&Tensor64::scalar(x0), &q, &Tensor64::scalar(1.0))?;
        let f = |x: f64, l: f64| surrogate(x, l, x0, l0, bits, signed);
        let num_x = (f(x0 + step * s, l0) - f(x0 - step * s, l0)) / (2.0 * step * s);
        let num_l = (f(x0, l0 + step) - f(x0, l0 - step)) / (2.0 * step);
        report.max_rel_err_x = report.max_rel_err_x.max(rel_err(gx.item(), num_x));
        report.max_rel_err_log2_t = report.max_rel_err_log2_t.max(rel_err(gl, num_l));
        report.points += 1;
    }
    Ok(report)
}

/// Sign structure of the threshold gradients on a transfer curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferSigns {
    pub inner_points: usize,
    /// Inner points whose `log2 t` gradient has the sign of
    /// `round(x/s) - x/s` (zero where that residual is zero).
    pub inner_sign_matches: usize,
    pub clipped_points: usize,
    /// Clipped points whose `log2 t` gradient has the sign of `x`.
    pub clipped_sign_matches: usize,
    /// Largest `|dy/dn| + |dy/dp|` of the clipped-gradient FakeQuant over
    /// inputs strictly inside `(n, p)`.
    pub fakequant_inner_max: f64,
}

/// Sweeps `x` across `[-2t, 2t]` for an 8-bit signed quantizer with
/// `t = 1` and collects the gradient signs, then sweeps the clipped-gradient
/// FakeQuant with limits `(-1, 1)` over the same inputs.
pub fn transfer_signs(samples: usize) -> Result<TransferSigns> {
    let q = Quantizer64::new(8, true, 0.0)?;
    let (s, _) = q.scale();
    let (n, p) = q.limits_real();
    let xs: Vec<f64> = (0..samples)
        .map(|i| -2.0 + 4.0 * (i as f64 + 0.5) / samples as f64)
        .collect();
    let x = Tensor64::from_vec(xs.clone());
    let mut out = TransferSigns {
        inner_points: 0,
        inner_sign_matches: 0,
        clipped_points: 0,
        clipped_sign_matches: 0,
        fakequant_inner_max: 0.0,
    };
    for &v in &xs {
        let (_, g) = quantize_backward(&Tensor64::scalar(v), &q, &Tensor64::scalar(1.0))?;
        let r = round_half_even(v / s);
        if r < n || r > p {
            out.clipped_points += 1;
            out.clipped_sign_matches += (g.signum() == v.signum()) as usize;
        } else {
            out.inner_points += 1;
            let resid = r - v / s;
            let matches = if resid == 0.0 { g == 0.0 } else { g.signum() == resid.signum() };
            out.inner_sign_matches += matches as usize;
        }
    }
    let fq = fakequant_clipped(&x, -1.0, 1.0, 8)?;
    for (i, &v) in xs.iter().enumerate() {
        if v > -1.0 && v < 1.0 {
            let g = fq.grad_n.data()[i].abs() + fq.grad_p.data()[i].abs();
            out.fakequant_inner_max = out.fakequant_inner_max.max(g);
        }
    }
    Ok(out)
}
