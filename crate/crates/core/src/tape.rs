//! Minimal reverse-mode differentiation tape.
//!
//! Every operation evaluates eagerly, stores its output, and records a
//! backward closure. Nodes are appended in evaluation order, so the record is
//! topological by construction and [`Tape::backward`] is a single reverse
//! sweep. Quantizers and other non-smooth ops register their own backward
//! closure through [`Tape::custom`]; the tape never differentiates forward
//! code.

use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees.
pub struct BackwardCtx<'a, T: Real> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub upstream: &'a Tensor<T>,
    /// Whether each input needs a gradient. Closures may return `None` for
    /// inputs that do not.
    pub needs: &'a [bool],
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Real> {
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Real> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    needs_grad: Vec<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn unary<T: Real>(
    f: impl Fn(&BackwardCtx<'_, T>) -> Result<Tensor<T>> + 'static,
) -> BackwardFn<T> {
    Box::new(move |ctx| Ok(vec![Some(f(ctx)?)]))
}

/// Elementwise mask-multiply used by piecewise-linear activations.
fn gate<T: Real>(ctx: &BackwardCtx<'_, T>, slope: impl Fn(T) -> T) -> Result<Tensor<T>> {
    ctx.upstream
        .zip_map(ctx.inputs[0], "activation_backward", |g, x| g * slope(x))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor<T>, inputs: Vec<Var>, backward: Option<BackwardFn<T>>) -> Var {
        value.debug_check_finite("tape op");
        let needs = backward.is_some() && inputs.iter().any(|i| self.needs_grad[i.0]);
        self.values.push(value);
        self.nodes.push(Node {
            inputs,
            backward: if needs { backward } else { None },
        });
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    /// A trainable leaf; gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.values.push(value);
        self.nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
        });
        self.needs_grad.push(true);
        Var(self.values.len() - 1)
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Records an op with a caller-supplied forward value and backward rule.
    /// The closure must return one entry per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var {
        self.push(value, inputs.to_vec(), Some(Box::new(backward)))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::ones(self.values[loss.0].shape()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(upstream) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.needs_grad[v.0]).collect();
            let ctx = BackwardCtx {
                inputs: &inputs,
                output: &self.values[id],
                upstream: &upstream,
                needs: &needs,
            };
            let local = backward(&ctx)?;
            if local.len() != node.inputs.len() {
                return Err(Error::Contract(format!(
                    "backward of node {id} returned {} grads for {} inputs",
                    local.len(),
                    node.inputs.len()
                )));
            }
            for ((input, g), need) in node.inputs.iter().zip(local).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                g.expect_shape(self.values[input.0].shape(), "backward")?;
                match &mut grads[input.0] {
                    Some(acc) => acc.accumulate(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the upstream of leaves and intermediate values available
            // to callers that inspect them.
            grads[id] = Some(upstream);
        }
        Ok(Grads { grads })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(
            y,
            vec![a, b],
            Some(Box::new(|ctx| Ok(vec![Some(ctx.upstream.clone()), Some(ctx.upstream.clone())]))),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(
            y,
            vec![a, b],
            Some(Box::new(|ctx| {
                Ok(vec![Some(ctx.upstream.clone()), Some(ctx.upstream.scale(-T::one()))])
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(
            y,
            vec![a, b],
            Some(Box::new(|ctx| {
                let ga = ctx.needs[0].then(|| ctx.upstream.mul(ctx.inputs[1])).transpose()?;
                let gb = ctx.needs[1].then(|| ctx.upstream.mul(ctx.inputs[0])).transpose()?;
                Ok(vec![ga, gb])
            })),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(
            y,
            vec![a, b],
            Some(Box::new(|ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.upstream);
                let ga = ctx.needs[0].then(|| g.zip_map(b, "div", |g, b| g / b)).transpose()?;
                let gb = if ctx.needs[1] {
                    let ga_b = g.mul(a)?;
                    Some(ga_b.zip_map(b, "div", |ga, b| -(ga / (b * b)))?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            })),
        ))
    }

    /// `x · c` for a constant scalar `c`.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).scale(c);
        self.push(y, vec![x], Some(unary(move |ctx| Ok(ctx.upstream.scale(c)))))
    }

    /// `x + c` for a constant scalar `c`.
    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v + c);
        self.push(y, vec![x], Some(unary(|ctx| Ok(ctx.upstream.clone()))))
    }

    /// Repeats a one-element tensor to `shape`; the backward pass sums.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.value(x).len() != 1 {
            return Err(Error::dim("broadcast", format!("source shape {:?}", self.value(x).shape())));
        }
        let src_shape = self.value(x).shape().to_vec();
        let y = Tensor::full(shape, self.value(x).item());
        Ok(self.push(
            y,
            vec![x],
            Some(unary(move |ctx| Tensor::new(src_shape.clone(), vec![ctx.upstream.sum()]))),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let src = self.value(x).shape().to_vec();
        Ok(self.push(y, vec![x], Some(unary(move |ctx| ctx.upstream.reshape(&src)))))
    }

    /// Forward identity, zero gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let y = self.value(x).clone();
        self.push(y, vec![x], None)
    }

    /// Round half to even. Piecewise constant, so it has no gradient; use
    /// [`Tape::stop_gradient`] wiring for a straight-through estimator.
    pub fn round(&mut self, x: Var) -> Var {
        let y = self.value(x).map(crate::quant::round_half_even);
        self.push(y, vec![x], None)
    }

    pub fn ceil(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.ceil());
        self.push(y, vec![x], None)
    }

    /// `2^x` elementwise.
    pub fn exp2(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.exp2());
        self.push(
            y,
            vec![x],
            Some(unary(|ctx| {
                ctx.upstream
                    .zip_map(ctx.output, "exp2", |g, y| g * (y * T::LN_2()))
            })),
        )
    }

    /// Clamp into `[lo, hi]`; gradient 1 inside (bounds included), 0 outside.
    pub fn clip(&mut self, x: Var, lo: T, hi: T) -> Var {
        let y = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(
            y,
            vec![x],
            Some(unary(move |ctx| {
                gate(ctx, |x| if x >= lo && x <= hi { T::one() } else { T::zero() })
            })),
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        self.push(
            y,
            vec![x],
            Some(unary(|ctx| gate(ctx, |x| x + x))),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let shape = self.value(x).shape().to_vec();
        self.push(
            y,
            vec![x],
            Some(unary(move |ctx| Ok(Tensor::full(&shape, ctx.upstream.item())))),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(
            y,
            vec![x],
            Some(unary(|ctx| gate(ctx, |x| if x > T::zero() { T::one() } else { T::zero() }))),
        )
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let y = ops::relu6(self.value(x));
        let six = T::lit(6.0);
        self.push(
            y,
            vec![x],
            Some(unary(move |ctx| {
                gate(ctx, |x| if x > T::zero() && x < six { T::one() } else { T::zero() })
            })),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Var {
        let y = ops::leaky_relu(self.value(x), alpha);
        self.push(
            y,
            vec![x],
            Some(unary(move |ctx| gate(ctx, |x| if x >= T::zero() { T::one() } else { alpha }))),
        )
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::maximum(self.value(a), self.value(b))?;
        Ok(self.push(
            y,
            vec![a, b],
            Some(Box::new(|ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.upstream);
                let mut ga = Tensor::zeros(a.shape());
                let mut gb = Tensor::zeros(b.shape());
                for i in 0..g.len() {
                    if a.data()[i] >= b.data()[i] {
                        ga.data_mut()[i] = g.data()[i];
                    } else {
                        gb.data_mut()[i] = g.data()[i];
                    }
                }
                Ok(vec![Some(ga), Some(gb)])
            })),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(
            y,
            vec![a, b],
            Some(Box::new(|ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.upstream);
                let ga = ctx.needs[0]
                    .then(|| ops::matmul(g, &ops::transpose2(b)?))
                    .transpose()?;
                let gb = ctx.needs[1]
                    .then(|| ops::matmul(&ops::transpose2(a)?, g))
                    .transpose()?;
                Ok(vec![ga, gb])
            })),
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: Padding) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(
            y,
            vec![x, w],
            Some(Box::new(move |ctx| {
                let (dx, dw) =
                    ops::conv2d_backward(ctx.inputs[0], ctx.inputs[1], ctx.upstream, stride, pad)?;
                Ok(vec![Some(dx), Some(dw)])
            })),
        ))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: Padding) -> Result<Var> {
        let y = ops::depthwise_conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(
            y,
            vec![x, w],
            Some(Box::new(move |ctx| {
                let (dx, dw) = ops::depthwise_conv2d_backward(
                    ctx.inputs[0],
                    ctx.inputs[1],
                    ctx.upstream,
                    stride,
                    pad,
                )?;
                Ok(vec![Some(dx), Some(dw)])
            })),
        ))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let y = ops::avg_pool(self.value(x), k, stride)?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            y,
            vec![x],
            Some(unary(move |ctx| ops::avg_pool_backward(&shape, ctx.upstream, k, stride))),
        ))
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = ops::bias_add(self.value(x), self.value(b))?;
        Ok(self.push(
            y,
            vec![x, b],
            Some(Box::new(|ctx| {
                Ok(vec![
                    Some(ctx.upstream.clone()),
                    Some(ops::reduce_to_channels(ctx.upstream)),
                ])
            })),
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&vals)?;
        let widths: Vec<usize> = vals.iter().map(|t| *t.shape().last().unwrap()).collect();
        Ok(self.push(
            y,
            xs.to_vec(),
            Some(Box::new(move |ctx| {
                Ok(ops::split_last(ctx.upstream, &widths)?.into_iter().map(Some).collect())
            })),
        ))
    }

    /// Mean softmax cross-entropy of `logits[B, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {:?} vs {} labels", z.shape(), labels.len()),
            ));
        }
        let (b, k) = (z.shape()[0], z.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(z);
        let mut loss = T::zero();
        for (row, &l) in labels.iter().enumerate() {
            loss -= probs.data()[row * k + l].max(T::min_positive_value()).ln();
        }
        loss /= T::lit(b as f64);
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits],
            Some(unary(move |ctx| {
                let scale = ctx.upstream.item() / T::lit(b as f64);
                let mut g = probs.clone();
                for (row, &l) in labels.iter().enumerate() {
                    g.data_mut()[row * k + l] -= T::one();
                }
                Ok(g.scale(scale))
            })),
        ))
    }

    /// Batch normalization with batch statistics over every axis but the
    /// last. Returns the output and the (mean, biased variance) used.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| Error::dim("batch_norm", "scalar input"))?;
        for p in [gamma, beta] {
            self.value(p).expect_shape(&[c], "batch_norm")?;
        }
        let m = xv.len() / c;
        let inv_m = T::one() / T::lit(m as f64);
        let mean = ops::reduce_to_channels(xv).scale(inv_m);
        let mut var = vec![T::zero(); c];
        for row in xv.data().chunks_exact(c) {
            for ((v, &x), &mu) in var.iter_mut().zip(row).zip(mean.data()) {
                *v += (x - mu) * (x - mu);
            }
        }
        let var = Tensor::from_vec(var).scale(inv_m);
        let inv_std: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for row in xhat.data_mut().chunks_exact_mut(c) {
            for ((v, &mu), &is) in row.iter_mut().zip(mean.data()).zip(&inv_std) {
                *v = (*v - mu) * is;
            }
        }
        let (g, bt) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_exact_mut(c) {
            for ((v, &gv), &bv) in row.iter_mut().zip(&g).zip(&bt) {
                *v = *v * gv + bv;
            }
        }
        let out = self.push(
            y,
            vec![x, gamma, beta],
            Some(Box::new(move |ctx| {
                let gamma = ctx.inputs[1].data();
                let dy = ctx.upstream;
                let dbeta = ops::reduce_to_channels(dy);
                let dgamma = ops::reduce_to_channels(&dy.mul(&xhat)?);
                let mut dx = dy.clone();
                for (row, xh) in dx.data_mut().chunks_exact_mut(c).zip(xhat.data().chunks_exact(c)) {
                    for ch in 0..c {
                        let mean_dy = dbeta.data()[ch] * inv_m;
                        let mean_dy_xh = dgamma.data()[ch] * inv_m;
                        row[ch] = gamma[ch] * inv_std[ch] * (row[ch] - mean_dy - xh[ch] * mean_dy_xh);
                    }
                }
                Ok(vec![Some(dx), Some(dgamma), Some(dbeta)])
            })),
        );
        Ok((out, mean, var))
    }
}

/// Row-wise softmax of a rank-2 tensor, max-shifted for stability.
pub fn softmax_rows<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let k = z.shape()[1];
    let mut out = z.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Compares tape gradients of a scalar function against central finite
/// differences. Returns the worst per-input relative error, measured as
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)`.
pub fn finite_difference_check(
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    for (i, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(var, input.shape());
        let mut numeric = Vec::with_capacity(input.len());
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for j in 0..input.len() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * step));
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_sum_of_squares_gradient_is_x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -2.0]));
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let s = tape.stop_gradient(x);
        let y = tape.mul(s, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn composite_network_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 6, 6, 2], 1.0);
        let w1: Tensor<f64> = rng.normal_tensor(&[3, 3, 2, 3], 0.5);
        let wd: Tensor<f64> = rng.normal_tensor(&[3, 3, 3, 1], 0.5);
        let b: Tensor<f64> = rng.normal_tensor(&[3], 0.5);
        let wm: Tensor<f64> = rng.normal_tensor(&[27, 4], 0.3);
        let err = finite_difference_check(
            |t, v| {
                let h = t.conv2d(v[0], v[1], 2, Padding::Same)?;
                let h = t.bias_add(h, v[3])?;
                let h = t.leaky_relu(h, 0.1);
                let d = t.depthwise_conv2d(h, v[2], 1, Padding::Same)?;
                let h = t.add(h, d)?;
                let h = t.reshape(h, &[2, 27])?;
                let z = t.matmul(h, v[4])?;
                let sq = t.square(z);
                Ok(t.mean(sq))
            },
            &[x, w1, wd, b, wm],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn cross_entropy_and_batch_norm_match_finite_differences() {
        let mut rng = Rng::new(12);
        let x: Tensor<f64> = rng.normal_tensor(&[4, 2, 2, 3], 1.0);
        let g: Tensor<f64> = rng.uniform_tensor(&[3], 0.5, 1.5);
        let b: Tensor<f64> = rng.normal_tensor(&[3], 0.3);
        let w: Tensor<f64> = rng.normal_tensor(&[12, 5], 0.5);
        let err = finite_difference_check(
            |t, v| {
                let (h, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                let h = t.relu6(h);
                let p = t.avg_pool(h, 2, 2)?;
                let c = t.concat(&[p, p])?;
                let c = t.reshape(c, &[4, 6])?;
                let m = t.maximum(c, c)?;
                let cc = t.concat(&[m, c])?;
                let z = t.matmul(cc, v[3])?;
                t.softmax_cross_entropy(z, &[0, 1, 4, 2])
            },
            &[x, g, b, w],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(9);
            let mut tape = Tape::new();
            let x = tape.param(rng.normal_tensor::<f64>(&[3, 4], 1.0));
            let w = tape.param(rng.normal_tensor::<f64>(&[4, 2], 1.0));
            let y = tape.matmul(x, w).unwrap();
            let s = tape.square(y);
            let l = tape.sum(s);
            let g = tape.backward(l).unwrap();
            (tape.value(y).clone(), g.get(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
