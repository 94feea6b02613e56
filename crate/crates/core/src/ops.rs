//! Forward and backward kernels on plain tensors.
//!
//! These are the building blocks used by the tape; they are also used
//! directly by code that only needs inference. All reductions run in a fixed
//! sequential order, so results are bit-reproducible.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::{Element, Real};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    Same,
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        })
    }
}

impl FromStr for Padding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Padding::Valid),
            "same" => Ok(Padding::Same),
            other => Err(Error::Contract(format!("unknown padding '{other}'"))),
        }
    }
}

/// Spatial bookkeeping shared by every windowed op (conv, depthwise conv,
/// pooling), in both the real and the integer runtimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// TensorFlow conventions: `same` yields `ceil(in / stride)` outputs with
    /// the extra padding on the bottom/right.
    pub fn new(
        input: &[usize],
        k_h: usize,
        k_w: usize,
        stride: usize,
        pad: Padding,
        op: &'static str,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::dim(op, format!("expected NHWC input, got {input:?}")));
        }
        if stride == 0 {
            return Err(Error::Contract(format!("{op}: stride must be >= 1")));
        }
        let (batch, in_h, in_w, channels) = (input[0], input[1], input[2], input[3]);
        let (out_h, out_w, pad_top, pad_left) = match pad {
            Padding::Valid => {
                if k_h > in_h || k_w > in_w {
                    return Err(Error::dim(
                        op,
                        format!("kernel {k_h}x{k_w} larger than input {in_h}x{in_w}"),
                    ));
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + k_h).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * stride + k_w).saturating_sub(in_w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
        };
        Ok(ConvGeometry {
            batch,
            in_h,
            in_w,
            channels,
            k_h,
            k_w,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    /// Input row/col for output position and kernel tap, `None` in padding.
    #[inline]
    pub fn input_pos(&self, oh: usize, ow: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.stride + i).checked_sub(self.pad_top)?;
        let iw = (ow * self.stride + j).checked_sub(self.pad_left)?;
        (ih < self.in_h && iw < self.in_w).then_some((ih, iw))
    }

    #[inline]
    pub fn in_index(&self, n: usize, ih: usize, iw: usize) -> usize {
        ((n * self.in_h + ih) * self.in_w + iw) * self.channels
    }

    #[inline]
    pub fn out_pixel(&self, n: usize, oh: usize, ow: usize) -> usize {
        (n * self.out_h + oh) * self.out_w + ow
    }
}

fn expect_rank<T: Element>(t: &Tensor<T>, rank: usize, op: &'static str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(op, format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim("matmul", format!("inner dims {k} vs {k2}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose2<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "transpose")?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

fn conv_geometry<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: Padding,
    depthwise: bool,
) -> Result<ConvGeometry> {
    let op = if depthwise { "depthwise_conv2d" } else { "conv2d" };
    expect_rank(w, 4, op)?;
    let geo = ConvGeometry::new(x.shape(), w.shape()[0], w.shape()[1], stride, pad, op)?;
    if w.shape()[2] != geo.channels {
        return Err(Error::dim(
            op,
            format!("filter expects {} channels, input has {}", w.shape()[2], geo.channels),
        ));
    }
    if depthwise && w.shape()[3] != 1 {
        return Err(Error::dim(op, "depthwise filter must be [kh, kw, C, 1]"));
    }
    Ok(geo)
}

/// Cross-correlation, NHWC input, `[kh, kw, c, f]` filter.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: Padding) -> Result<Tensor<T>> {
    let g = conv_geometry(x, w, stride, pad, false)?;
    let f = w.shape()[3];
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * f];
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let o = g.out_pixel(n, oh, ow) * f;
                let acc = &mut out[o..o + f];
                for i in 0..g.k_h {
                    for j in 0..g.k_w {
                        let Some((ih, iw)) = g.input_pos(oh, ow, i, j) else { continue };
                        let xi = g.in_index(n, ih, iw);
                        for c in 0..g.channels {
                            let xv = xd[xi + c];
                            let wrow = &wd[((i * g.k_w + j) * g.channels + c) * f..][..f];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_h, g.out_w, f], out)
}

/// Gradients of [`conv2d`] with respect to input and filter.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(x, w, stride, pad, false)?;
    let f = w.shape()[3];
    dy.expect_shape(&[g.batch, g.out_h, g.out_w, f], "conv2d_backward")?;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let grow = &dyd[g.out_pixel(n, oh, ow) * f..][..f];
                for i in 0..g.k_h {
                    for j in 0..g.k_w {
                        let Some((ih, iw)) = g.input_pos(oh, ow, i, j) else { continue };
                        let xi = g.in_index(n, ih, iw);
                        for c in 0..g.channels {
                            let wo = ((i * g.k_w + j) * g.channels + c) * f;
                            let wrow = &wd[wo..wo + f];
                            let mut s = T::zero();
                            for (&gv, &wv) in grow.iter().zip(wrow) {
                                s += gv * wv;
                            }
                            dx[xi + c] += s;
                            let xv = xd[xi + c];
                            for (d, &gv) in dw[wo..wo + f].iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
    ))
}

/// One filter per channel; filter shape `[kh, kw, C, 1]`.
pub fn depthwise_conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, w, stride, pad, true)?;
    let c = g.channels;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * c];
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let o = g.out_pixel(n, oh, ow) * c;
                for i in 0..g.k_h {
                    for j in 0..g.k_w {
                        let Some((ih, iw)) = g.input_pos(oh, ow, i, j) else { continue };
                        let xi = g.in_index(n, ih, iw);
                        let wi = (i * g.k_w + j) * c;
                        for ch in 0..c {
                            out[o + ch] += xd[xi + ch] * wd[wi + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_h, g.out_w, c], out)
}

pub fn depthwise_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(x, w, stride, pad, true)?;
    let c = g.channels;
    dy.expect_shape(&[g.batch, g.out_h, g.out_w, c], "depthwise_conv2d_backward")?;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let o = g.out_pixel(n, oh, ow) * c;
                for i in 0..g.k_h {
                    for j in 0..g.k_w {
                        let Some((ih, iw)) = g.input_pos(oh, ow, i, j) else { continue };
                        let xi = g.in_index(n, ih, iw);
                        let wi = (i * g.k_w + j) * c;
                        for ch in 0..c {
                            let gv = dyd[o + ch];
                            dx[xi + ch] += gv * wd[wi + ch];
                            dw[wi + ch] += gv * xd[xi + ch];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
    ))
}

/// Average pooling, `valid` padding only (every window is full).
pub fn avg_pool<T: Real>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), k, k, stride, Padding::Valid, "avg_pool")?;
    let c = g.channels;
    let inv = T::one() / T::lit((k * k) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * c];
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let o = g.out_pixel(n, oh, ow) * c;
                for i in 0..k {
                    for j in 0..k {
                        let (ih, iw) = g.input_pos(oh, ow, i, j).expect("valid window");
                        let xi = g.in_index(n, ih, iw);
                        for ch in 0..c {
                            out[o + ch] += xd[xi + ch];
                        }
                    }
                }
                for v in &mut out[o..o + c] {
                    *v *= inv;
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_h, g.out_w, c], out)
}

pub fn avg_pool_backward<T: Real>(x_shape: &[usize], dy: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x_shape, k, k, stride, Padding::Valid, "avg_pool")?;
    let c = g.channels;
    dy.expect_shape(&[g.batch, g.out_h, g.out_w, c], "avg_pool_backward")?;
    let inv = T::one() / T::lit((k * k) as f64);
    let dyd = dy.data();
    let mut dx = vec![T::zero(); x_shape.iter().product()];
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let o = g.out_pixel(n, oh, ow) * c;
                for i in 0..k {
                    for j in 0..k {
                        let (ih, iw) = g.input_pos(oh, ow, i, j).expect("valid window");
                        let xi = g.in_index(n, ih, iw);
                        for ch in 0..c {
                            dx[xi + ch] += dyd[o + ch] * inv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Adds `b[C]` along the last axis.
pub fn bias_add<T: Real>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().ok_or_else(|| Error::dim("bias_add", "scalar input"))?;
    if b.rank() != 1 || b.len() != c {
        return Err(Error::dim(
            "bias_add",
            format!("bias {:?} vs channels {c}", b.shape()),
        ));
    }
    let bd = b.data();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (v, &bv) in row.iter_mut().zip(bd) {
            *v += bv;
        }
    }
    Ok(out)
}

/// Sums `dy` over every axis but the last.
pub fn reduce_to_channels<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let c = *dy.shape().last().expect("rank >= 1");
    let mut out = vec![T::zero(); c];
    for row in dy.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_vec(out)
}

/// Concatenation along the last axis.
pub fn concat<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
    let lead = &first.shape()[..first.rank() - 1];
    let mut widths = Vec::with_capacity(xs.len());
    for x in xs {
        if x.rank() != first.rank() || &x.shape()[..x.rank() - 1] != lead {
            return Err(Error::dim(
                "concat",
                format!("{:?} vs {:?}", x.shape(), first.shape()),
            ));
        }
        widths.push(*x.shape().last().unwrap());
    }
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (x, &w) in xs.iter().zip(&widths) {
            out.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, out)
}

/// Inverse of [`concat`]: splits `dy` along the last axis into `widths`.
pub fn split_last<T: Element>(dy: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = widths.iter().sum();
    if dy.shape().last() != Some(&total) {
        return Err(Error::dim("split", format!("{:?} vs widths {widths:?}", dy.shape())));
    }
    let lead = &dy.shape()[..dy.rank() - 1];
    let rows: usize = lead.iter().product();
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
    for r in 0..rows {
        let mut off = r * total;
        for (p, &w) in parts.iter_mut().zip(widths) {
            p.extend_from_slice(&dy.data()[off..off + w]);
            off += w;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(p, &w)| {
            let mut shape = lead.to_vec();
            shape.push(w);
            Tensor::new(shape, p)
        })
        .collect()
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu6<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::lit(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { alpha * v })
}

pub fn maximum<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "maximum", |x, y| x.max(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(matmul(&a, &t(&[3, 1], &[1., 1., 1.])).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(1);
        let a: Tensor<f64> = rng.normal_tensor(&[4, 5], 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[5, 3], 1.0);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::<f64>::ones(&[1, 3, 3, 1]);
        let w = Tensor::<f64>::ones(&[3, 3, 1, 1]);
        let y = conv2d(&x, &w, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn impulse_response_replicates_kernel() {
        // Cross-correlation of a centred impulse yields the kernel flipped
        // about the centre, i.e. out[i][j] = w[2-i][2-j].
        let mut x = Tensor::<f64>::zeros(&[1, 5, 5, 1]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let w = t(&[3, 3, 1, 1], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let y = conv2d(&x, &w, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5, 1]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y.data()[(1 + i) * 5 + (1 + j)], w.data()[(2 - i) * 3 + (2 - j)]);
            }
        }
        assert_eq!(y.sum(), w.sum());
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = Rng::new(3);
        let x: Tensor<f64> = rng.normal_tensor(&[1, 8, 8, 2], 1.0);
        let w: Tensor<f64> = rng.normal_tensor(&[3, 3, 2, 4], 1.0);
        for (stride, pad) in [(1, Padding::Valid), (1, Padding::Same), (2, Padding::Same)] {
            let y = conv2d(&x, &w, stride, pad).unwrap();
            let (oh, ow) = (y.shape()[1], y.shape()[2]);
            let (pt, pl) = if pad == Padding::Same {
                let ph = ((oh - 1) * stride + 3).saturating_sub(8);
                let pw = ((ow - 1) * stride + 3).saturating_sub(8);
                (ph / 2, pw / 2)
            } else {
                (0, 0)
            };
            for a in 0..oh {
                for b in 0..ow {
                    for f in 0..4 {
                        let mut s = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                let ih = (a * stride + i) as isize - pt as isize;
                                let iw = (b * stride + j) as isize - pl as isize;
                                if ih < 0 || iw < 0 || ih >= 8 || iw >= 8 {
                                    continue;
                                }
                                for c in 0..2 {
                                    s += x.data()[((ih as usize) * 8 + iw as usize) * 2 + c]
                                        * w.data()[((i * 3 + j) * 2 + c) * 4 + f];
                                }
                            }
                        }
                        let got = y.data()[((a * ow) + b) * 4 + f];
                        assert!((got - s).abs() < 1e-12, "{stride} {pad}: {got} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let x = Tensor::<f64>::ones(&[1, 4, 4, 3]);
        let w = Tensor::<f64>::ones(&[3, 3, 2, 1]);
        assert!(matches!(conv2d(&x, &w, 1, Padding::Same), Err(Error::Dimension { .. })));
    }

    #[test]
    fn avg_pool_equals_depthwise_with_reciprocal_weights() {
        let mut rng = Rng::new(5);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 4, 4, 3], 1.0);
        let w = Tensor::full(&[2, 2, 3, 1], 0.25);
        let a = avg_pool(&x, 2, 2).unwrap();
        let b = depthwise_conv2d(&x, &w, 2, Padding::Valid).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn concat_split_inverse() {
        let a = t(&[2, 1], &[1., 2.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        let c = concat(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        let parts = split_last(&c, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
