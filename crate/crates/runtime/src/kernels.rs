//! Integer kernels with 32-bit checked accumulation.

use tqt_core::ops::ConvGeometry;
use tqt_core::{IntTensor, Padding};

use crate::error::{Result, RuntimeError};

/// Accumulator that reports the first overflow instead of wrapping.
#[derive(Clone, Copy)]
struct Acc<'a> {
    node: &'a str,
}

impl Acc<'_> {
    #[inline]
    fn mac(self, acc: i32, a: i32, b: i32) -> Result<i32> {
        a.checked_mul(b)
            .and_then(|p| acc.checked_add(p))
            .ok_or_else(|| self.overflow(format!("{acc} + {a} * {b}")))
    }

    #[inline]
    fn add(self, a: i32, b: i32) -> Result<i32> {
        a.checked_add(b).ok_or_else(|| self.overflow(format!("{a} + {b}")))
    }

    fn overflow(self, detail: String) -> RuntimeError {
        RuntimeError::Overflow {
            node: self.node.to_string(),
            detail: format!("{detail} exceeds 32 bits"),
        }
    }
}

fn dim(node: &str, msg: String) -> RuntimeError {
    RuntimeError::invalid(node, msg)
}

pub fn matmul(node: &str, a: &IntTensor, b: &IntTensor) -> Result<IntTensor> {
    let acc = Acc { node };
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(dim(node, format!("matmul of {:?} and {:?}", a.shape(), b.shape())));
    };
    if k != k2 {
        return Err(dim(node, format!("matmul inner dims {k} and {k2}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        for (j, o) in out[i * n..(i + 1) * n].iter_mut().enumerate() {
            let mut s = 0i32;
            for p in 0..k {
                s = acc.mac(s, ad[i * k + p], bd[p * n + j])?;
            }
            *o = s;
        }
    }
    Ok(IntTensor::new(vec![m, n], out)?)
}

fn geometry(node: &str, x: &IntTensor, w: &IntTensor, stride: usize, pad: Padding, depthwise: bool) -> Result<ConvGeometry> {
    if w.rank() != 4 {
        return Err(dim(node, format!("filter shape {:?}", w.shape())));
    }
    let g = ConvGeometry::new(x.shape(), w.shape()[0], w.shape()[1], stride, pad, "int_conv")?;
    let ok = if depthwise {
        w.shape()[2] == g.channels && w.shape()[3] == 1
    } else {
        w.shape()[2] == g.channels
    };
    if !ok {
        return Err(dim(node, format!("filter {:?} for input {:?}", w.shape(), x.shape())));
    }
    Ok(g)
}

pub fn conv2d(node: &str, x: &IntTensor, w: &IntTensor, stride: usize, pad: Padding) -> Result<IntTensor> {
    let acc = Acc { node };
    let g = geometry(node, x, w, stride, pad, false)?;
    let f = w.shape()[3];
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0i32; g.batch * g.out_h * g.out_w * f];
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let o = g.out_pixel(n, oh, ow) * f;
                for (oc, slot) in out[o..o + f].iter_mut().enumerate() {
                    let mut s = 0i32;
                    for i in 0..g.k_h {
                        for j in 0..g.k_w {
                            let Some((ih, iw)) = g.input_pos(oh, ow, i, j) else { continue };
                            let xi = g.in_index(n, ih, iw);
                            for c in 0..g.channels {
                                s = acc.mac(s, xd[xi + c], wd[((i * g.k_w + j) * g.channels + c) * f + oc])?;
                            }
                        }
                    }
                    *slot = s;
                }
            }
        }
    }
    Ok(IntTensor::new(vec![g.batch, g.out_h, g.out_w, f], out)?)
}

pub fn depthwise_conv2d(node: &str, x: &IntTensor, w: &IntTensor, stride: usize, pad: Padding) -> Result<IntTensor> {
    let acc = Acc { node };
    let g = geometry(node, x, w, stride, pad, true)?;
    let c = g.channels;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0i32; g.batch * g.out_h * g.out_w * c];
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let o = g.out_pixel(n, oh, ow) * c;
                for ch in 0..c {
                    let mut s = 0i32;
                    for i in 0..g.k_h {
                        for j in 0..g.k_w {
                            let Some((ih, iw)) = g.input_pos(oh, ow, i, j) else { continue };
                            s = acc.mac(s, xd[g.in_index(n, ih, iw) + ch], wd[(i * g.k_w + j) * c + ch])?;
                        }
                    }
                    out[o + ch] = s;
                }
            }
        }
    }
    Ok(IntTensor::new(vec![g.batch, g.out_h, g.out_w, c], out)?)
}

pub fn bias_add(node: &str, x: &IntTensor, b: &IntTensor) -> Result<IntTensor> {
    let acc = Acc { node };
    let c = *x.shape().last().unwrap_or(&0);
    if b.shape() != [c] {
        return Err(dim(node, format!("bias {:?} for input {:?}", b.shape(), x.shape())));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v = acc.add(*v, bv)?;
        }
    }
    Ok(out)
}

pub fn add(node: &str, a: &IntTensor, b: &IntTensor) -> Result<IntTensor> {
    let acc = Acc { node };
    if a.shape() != b.shape() {
        return Err(dim(node, format!("add of {:?} and {:?}", a.shape(), b.shape())));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| acc.add(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(IntTensor::new(a.shape().to_vec(), data)?)
}

pub fn max(node: &str, a: &IntTensor, b: &IntTensor) -> Result<IntTensor> {
    if a.shape() != b.shape() {
        return Err(dim(node, format!("max of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(a.zip_map(b, "max", |x: i32, y: i32| x.max(y))?)
}

/// One-element `a` times every element of `b`.
pub fn scalar_mul(node: &str, a: &IntTensor, b: &IntTensor) -> Result<IntTensor> {
    let acc = Acc { node };
    if a.len() != 1 {
        return Err(dim(node, format!("mul needs a one-element factor, got {:?}", a.shape())));
    }
    let k = a.data()[0];
    let data = b
        .data()
        .iter()
        .map(|&v| acc.mac(0, k, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(IntTensor::new(b.shape().to_vec(), data)?)
}
