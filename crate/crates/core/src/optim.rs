//! Optimizers and threshold-training control.

use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn sgd_step<T: Real>(param: T, grad: T, lr: T) -> Result<T> {
    if !grad.is_finite() || !param.is_finite() {
        return Err(Error::Training(format!("non-finite SGD input: param {param}, grad {grad}")));
    }
    Ok(param - lr * grad)
}

/// Adam moments for one parameter tensor (flattened).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub alpha: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, alpha: T, beta1: T, beta2: T, eps: T) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            alpha,
            beta1,
            beta2,
            eps,
        }
    }

    /// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn with_defaults(len: usize, alpha: T) -> Self {
        Self::new(len, alpha, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    /// Updates the moments and returns `-alpha · m̂ / (sqrt(v̂) + eps)`.
    pub fn step(&mut self, grad: &[T]) -> Result<Vec<T>> {
        let alpha = self.alpha;
        self.step_lr(grad, alpha)
    }

    /// As [`AdamState::step`] with an externally scheduled learning rate.
    pub fn step_lr(&mut self, grad: &[T], lr: T) -> Result<Vec<T>> {
        if grad.len() != self.m.len() {
            return Err(Error::dim(
                "adam",
                format!("{} grads for {} moments", grad.len(), self.m.len()),
            ));
        }
        if let Some(g) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient {g}")));
        }
        self.step += 1;
        let i = self.step as i32;
        let c1 = T::one() - self.beta1.powi(i);
        let c2 = T::one() - self.beta2.powi(i);
        let mut upd = Vec::with_capacity(grad.len());
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *m = self.beta1 * *m + (T::one() - self.beta1) * g;
            *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            upd.push(-lr * mh / (vh.sqrt() + self.eps));
        }
        Ok(upd)
    }
}

/// Gradient normalized by its bias-corrected moving variance and squashed
/// through `tanh`, for use with plain SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct NormedGradState<T> {
    pub v: T,
    pub beta: T,
    pub eps: T,
    pub step: u64,
}

impl<T: Real> NormedGradState<T> {
    pub fn new(beta: T, eps: T) -> Self {
        NormedGradState {
            v: T::zero(),
            beta,
            eps,
            step: 0,
        }
    }

    pub fn normed_grad(&mut self, g: T) -> T {
        self.step += 1;
        self.v = self.beta * self.v + (T::one() - self.beta) * g * g;
        let vh = self.v / (T::one() - self.beta.powi(self.step as i32));
        (g / (vh.sqrt() + self.eps)).tanh()
    }
}

/// Stability limits for Adam on log-thresholds at a given bit-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidelines {
    pub alpha_max: f64,
    pub beta1_min: f64,
    pub beta2_min: f64,
    pub steps_estimate: f64,
}

/// `alpha_max = 0.1 / sqrt(2^(b-1))`, `beta1_min = 1/e`,
/// `beta2_min = 1 - 0.1 / (2^(b-1) - 1)`, and a convergence time of
/// `1/alpha + 1/(1 - beta2)` steps at those limits.
pub fn adam_guidelines(bits: u32) -> Result<Guidelines> {
    if bits < 2 {
        return Err(Error::Contract(format!("bit-width {bits} below 2")));
    }
    let half = 2f64.powi(bits as i32 - 1);
    let alpha_max = 0.1 / half.sqrt();
    let beta2_min = 1.0 - 0.1 / (half - 1.0);
    Ok(Guidelines {
        alpha_max,
        beta1_min: (-1.0f64).exp(),
        beta2_min,
        steps_estimate: 1.0 / alpha_max + 1.0 / (1.0 - beta2_min),
    })
}

/// Staircase exponential decay, `base · factor^floor(step / period)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub period: u64,
}

/// Reference batch size the step counts are expressed in.
pub const REFERENCE_BATCH: u64 = 24;

/// `steps · 24 / batch`, at least 1.
pub fn batch_scaled(steps: u64, batch: u64) -> u64 {
    (steps * REFERENCE_BATCH / batch.max(1)).max(1)
}

impl LrSchedule {
    /// `1e-6 · 0.94^floor(step / (3000 · 24 / N))`.
    pub fn weights(batch: u64) -> Self {
        LrSchedule {
            base: 1e-6,
            factor: 0.94,
            period: batch_scaled(3000, batch),
        }
    }

    /// `1e-2 · 0.5^floor(step / (1000 · 24 / N))`.
    pub fn thresholds(batch: u64) -> Self {
        LrSchedule {
            base: 1e-2,
            factor: 0.5,
            period: batch_scaled(1000, batch),
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        self.base * self.factor.powi((step / self.period) as i32)
    }
}

/// Freezes one threshold at a time once training has settled.
///
/// From `start` on, every `interval` steps, the unfrozen threshold with the
/// smallest absolute gradient among the eligible ones is frozen. A
/// threshold is eligible when its current log-value and the exponential
/// moving average of its log-value lie on the same side of the integer
/// nearest to the average.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeController {
    pub ema: Vec<f64>,
    pub frozen: Vec<bool>,
    pub step: u64,
    pub start: u64,
    pub interval: u64,
    pub decay: f64,
}

impl FreezeController {
    pub fn new(count: usize, batch: u64) -> Self {
        Self::with_start(count, batch_scaled(1000, batch))
    }

    pub fn with_start(count: usize, start: u64) -> Self {
        FreezeController {
            ema: Vec::with_capacity(count),
            frozen: vec![false; count],
            step: 0,
            start,
            interval: 50,
            decay: 0.9,
        }
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    fn eligible(&self, i: usize, current: f64) -> bool {
        let boundary = self.ema[i].round();
        (self.ema[i] > boundary) == (current > boundary)
    }

    /// Call once per training step. Returns the index frozen at this step.
    pub fn freeze_step(&mut self, grads: &[f64], log2_ts: &[f64]) -> Result<Option<usize>> {
        let n = self.frozen.len();
        if grads.len() != n || log2_ts.len() != n {
            return Err(Error::dim(
                "freeze_step",
                format!("{} thresholds, got {} grads and {} values", n, grads.len(), log2_ts.len()),
            ));
        }
        if self.ema.is_empty() {
            self.ema = log2_ts.to_vec();
        } else {
            for (e, &v) in self.ema.iter_mut().zip(log2_ts) {
                *e = self.decay * *e + (1.0 - self.decay) * v;
            }
        }
        let step = self.step;
        self.step += 1;
        if step < self.start || !(step - self.start).is_multiple_of(self.interval) {
            return Ok(None);
        }
        let pick = (0..n)
            .filter(|&i| !self.frozen[i] && self.eligible(i, log2_ts[i]))
            .min_by(|&a, &b| grads[a].abs().total_cmp(&grads[b].abs()).then(a.cmp(&b)));
        if let Some(i) = pick {
            self.frozen[i] = true;
        }
        Ok(pick)
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f64,
    pub log2_ts: Vec<f64>,
    pub grads: Vec<f64>,
    pub frozen: Vec<bool>,
}

pub fn write_train_log<W: Write>(out: W, names: &[String], rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["step".to_string(), "loss".to_string()];
    for prefix in ["log2_t", "grad", "frozen"] {
        header.extend(names.iter().map(|n| format!("{prefix}:{n}")));
    }
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.loss.to_string()];
        rec.extend(r.log2_ts.iter().map(f64::to_string));
        rec.extend(r.grads.iter().map(f64::to_string));
        rec.extend(r.frozen.iter().map(|f| u8::from(*f).to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sgd_examples() {
        assert_eq!(sgd_step(1.0, 0.5, 0.1).unwrap(), 0.95);
        assert_eq!(sgd_step(1.0, 0.0, 0.1).unwrap(), 1.0);
        assert!(matches!(sgd_step(1.0, f64::NAN, 0.1), Err(Error::Training(_))));
    }

    #[test]
    fn sgd_on_quadratic_decays_geometrically() {
        // L = k x^2 / 2, so x_i = x_0 (1 - lr k)^i.
        let (k, lr) = (2.0, 0.1);
        let mut x = 3.0;
        for i in 1..=50 {
            x = sgd_step(x, k * x, lr).unwrap();
            let closed = 3.0 * (1.0f64 - lr * k).powi(i);
            assert!((x - closed).abs() < 1e-12 * closed.abs().max(1e-300));
        }
    }

    #[test]
    fn adam_first_step_is_alpha_sign() {
        for g in [3.0, -1e-3, 42.0] {
            let mut a = AdamState::new(1, 0.01, 0.9, 0.999, 1e-12);
            let u = a.step(&[g]).unwrap()[0];
            assert!((u + 0.01 * f64::signum(g)).abs() < 1e-9, "{u}");
        }
    }

    #[test]
    fn adam_zero_grad_does_not_move() {
        let mut a = AdamState::with_defaults(2, 0.01);
        for _ in 0..10 {
            assert_eq!(a.step(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn adam_constant_grad_update_band() {
        let mut a = AdamState::new(1, 0.01, 0.9, 0.999, 1e-12);
        for _ in 0..100 {
            let u = -a.step(&[0.7]).unwrap()[0];
            assert!((0.9 * 0.01..=0.01 + 1e-12).contains(&u), "{u}");
        }
    }

    #[test]
    fn normed_grad_examples() {
        let mut s = NormedGradState::new(0.999, 1e-12);
        assert_eq!(s.normed_grad(0.0), 0.0);
        let mut s = NormedGradState::new(0.999, 1e-12);
        assert!((s.normed_grad(0.3) - 1f64.tanh()).abs() < 1e-9);
    }

    #[test]
    fn normed_grad_alternating_stream_is_bounded() {
        // With constant magnitude the bias-corrected variance equals g^2
        // exactly, so every output is tanh(1) in magnitude.
        let mut s = NormedGradState::new(0.99, 1e-12);
        for i in 0..2000 {
            let g: f64 = if i % 2 == 0 { 0.5 } else { -0.5 };
            let out = s.normed_grad(g).abs();
            assert!(out <= 2f64.sqrt().tanh() * (1.0 + 1e-9));
        }
    }

    #[test]
    fn guideline_values() {
        let g4 = adam_guidelines(4).unwrap();
        assert!((0.034..=0.036).contains(&g4.alpha_max));
        assert!((0.9857..=0.9858).contains(&g4.beta2_min));
        assert!((g4.steps_estimate - 100.0).abs() < 5.0);
        let g8 = adam_guidelines(8).unwrap();
        assert!((0.0088..=0.0090).contains(&g8.alpha_max));
        assert!((0.99920..=0.99922).contains(&g8.beta2_min));
        assert!((g8.beta1_min - 0.36788).abs() < 1e-5);
        assert!((adam_guidelines(2).unwrap().alpha_max - 0.1 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn schedule_examples() {
        let th = LrSchedule::thresholds(24);
        assert_eq!(th.lr(0), 1e-2);
        assert_eq!(th.lr(999), 1e-2);
        assert_eq!(th.lr(1000), 5e-3);
        assert_eq!(LrSchedule::weights(24).lr(6000), 1e-6 * 0.94 * 0.94);
        assert_eq!(LrSchedule::thresholds(48).period, 500);
    }

    #[test]
    fn freeze_waits_for_start() {
        let mut fc = FreezeController::with_start(2, 100);
        for _ in 0..100 {
            assert_eq!(fc.freeze_step(&[0.1, 0.2], &[0.2, 0.2]).unwrap(), None);
        }
        assert_eq!(fc.frozen_count(), 0);
        assert_eq!(fc.freeze_step(&[0.1, 0.2], &[0.2, 0.2]).unwrap(), Some(0));
    }

    #[test]
    fn freeze_order_by_gradient_magnitude() {
        let mut fc = FreezeController::with_start(3, 0);
        let vals = [1.3, -2.4, 0.2];
        assert_eq!(fc.freeze_step(&[0.5, -0.1, 0.9], &vals).unwrap(), Some(1));
        for _ in 0..49 {
            assert_eq!(fc.freeze_step(&[0.5, -0.1, 0.9], &vals).unwrap(), None);
        }
        assert_eq!(fc.freeze_step(&[0.5, -0.1, 0.9], &vals).unwrap(), Some(0));
    }

    #[test]
    fn freeze_skips_wrong_side() {
        let mut fc = FreezeController::with_start(1, 0);
        fc.ema = vec![2.8];
        // The average stays below 3 while the current value is above it.
        assert_eq!(fc.freeze_step(&[0.1], &[3.5]).unwrap(), None);
    }

    #[test]
    fn train_log_layout() {
        let mut buf = Vec::new();
        write_train_log(
            &mut buf,
            &["a".into()],
            &[TrainLogRow {
                step: 3,
                loss: 0.5,
                log2_ts: vec![1.5],
                grads: vec![-0.25],
                frozen: vec![true],
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,loss,log2_t:a,grad:a,frozen:a\n3,0.5,1.5,-0.25,1\n"
        );
    }

    proptest! {
        #[test]
        fn adam_is_scale_invariant(
            steps in proptest::collection::vec((1e-2f64..10.0, any::<bool>()), 1..60),
            c in 1e-2f64..1e2,
        ) {
            let grads: Vec<f64> = steps.iter().map(|&(m, neg): &(f64, bool)| if neg { -m } else { m }).collect();
            let mut a = AdamState::new(1, 0.01, 0.9, 0.999, 1e-12);
            let mut b = AdamState::new(1, 0.01, 0.9, 0.999, 1e-12);
            for &g in &grads {
                let ua = a.step(&[g]).unwrap()[0];
                let ub = b.step(&[g * c]).unwrap()[0];
                prop_assert!((ua - ub).abs() <= 1e-6 * ua.abs().max(1e-9), "{} vs {}", ua, ub);
            }
        }

        #[test]
        fn normed_grad_in_open_unit_interval(grads in proptest::collection::vec(-1e3f64..1e3, 1..100)) {
            let mut s = NormedGradState::new(0.999, 1e-12);
            for &g in &grads {
                let out = s.normed_grad(g);
                prop_assert!(out > -1.0 && out < 1.0);
            }
        }

        #[test]
        fn normed_sgd_step_bounded_by_alpha(grads in proptest::collection::vec(-1e3f64..1e3, 1..100), alpha in 1e-4f64..1.0) {
            let mut s = NormedGradState::new(0.999, 1e-12);
            let mut l = 0.0f64;
            for &g in &grads {
                let next = sgd_step(l, s.normed_grad(g), alpha).unwrap();
                prop_assert!((next - l).abs() <= alpha);
                l = next;
            }
        }

        #[test]
        fn frozen_set_only_grows(steps in proptest::collection::vec((-1.0f64..1.0, -3.0f64..3.0), 1..300)) {
            let mut fc = FreezeController::with_start(3, 10);
            let mut prev = 0;
            for (g, v) in steps {
                fc.freeze_step(&[g, g * 0.5, -g], &[v, v + 0.3, v - 0.2]).unwrap();
                prop_assert!(fc.frozen_count() >= prev);
                prev = fc.frozen_count();
            }
        }
    }
}
