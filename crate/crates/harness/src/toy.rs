//! A single quantizer trained on its own L2 reconstruction error.
//!
//! Every step draws a fresh batch, evaluates `L = mean((q(x) - x)^2) / 2`
//! and moves the threshold with one of four update rules. The recorded
//! trajectories are what the oscillation analysis consumes.

use std::fmt;
use std::str::FromStr;

use tqt_core::calib::calib_max;
use tqt_core::optim::{AdamState, NormedGradState};
use tqt_core::quant::{fakequant_clipped, quantize_backward, quantize_forward};
use tqt_core::{Quantizer64, Rng, Tensor64};

use crate::error::{HarnessError, Result};

/// `|log2 t|` beyond this counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 64.0;

/// Fraction of a trajectory treated as the post-convergence tail.
pub const TAIL_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyOptimizer {
    /// SGD on the raw threshold `t`.
    RawSgd,
    /// SGD on `log2 t`.
    LogSgd,
    /// Adam on `log2 t`.
    LogAdam,
    /// SGD on the tanh-normed `log2 t` gradient.
    NormedLogSgd,
}

impl ToyOptimizer {
    pub const ALL: [ToyOptimizer; 4] = [
        ToyOptimizer::RawSgd,
        ToyOptimizer::LogSgd,
        ToyOptimizer::LogAdam,
        ToyOptimizer::NormedLogSgd,
    ];
}

impl fmt::Display for ToyOptimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyOptimizer::RawSgd => "raw-sgd",
            ToyOptimizer::LogSgd => "log-sgd",
            ToyOptimizer::LogAdam => "log-adam",
            ToyOptimizer::NormedLogSgd => "normed-log-sgd",
        })
    }
}

impl FromStr for ToyOptimizer {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        ToyOptimizer::ALL
            .into_iter()
            .find(|o| o.to_string() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown toy optimizer '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRunConfig {
    pub bits: u32,
    pub signed: bool,
    pub sigma: f64,
    /// Samples drawn per step.
    pub batch: usize,
    pub optimizer: ToyOptimizer,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adam denominator offset. The toy gradients scale with `sigma^2`, so
    /// the usual `1e-8` would swamp them at small input scales.
    pub eps: f64,
    pub steps: usize,
    pub seed: u64,
    /// Starting `log2 t`; `None` calibrates to the max of one batch.
    pub init_log2_t: Option<f64>,
}

impl ToyRunConfig {
    pub fn new(bits: u32, sigma: f64, optimizer: ToyOptimizer, alpha: f64) -> Self {
        ToyRunConfig {
            bits,
            signed: true,
            sigma,
            batch: 1000,
            optimizer,
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
            steps: 2000,
            seed: 0,
            init_log2_t: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(HarnessError::Config("toy run needs at least one step".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(HarnessError::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.batch == 0 {
            return Err(HarnessError::Config("toy batch must be nonempty".into()));
        }
        if self.bits < 2 || self.bits > 16 {
            return Err(HarnessError::Config(format!("unsupported bit-width {}", self.bits)));
        }
        if !(self.alpha >= 0.0) {
            return Err(HarnessError::Config(format!("negative learning rate {}", self.alpha)));
        }
        Ok(())
    }
}

/// Per-step record: the threshold used at the step, the loss it produced
/// and the gradient with respect to `log2 t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub log2_t: Vec<f64>,
    pub loss: Vec<f64>,
    pub grad: Vec<f64>,
    /// Step at which the threshold left the finite range, if it did.
    pub diverged: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.log2_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log2_t.is_empty()
    }

    pub fn last_log2_t(&self) -> Option<f64> {
        self.log2_t.last().copied()
    }

    /// Number of distinct `ceil(log2 t)` bins visited from `from` on.
    pub fn bins_visited(&self, from: usize) -> usize {
        let mut bins: Vec<i64> = self.log2_t[from.min(self.len())..]
            .iter()
            .map(|v| v.ceil() as i64)
            .collect();
        bins.sort_unstable();
        bins.dedup();
        bins.len()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "log2_t", "loss", "grad"])?;
        for i in 0..self.len() {
            w.write_record([
                i.to_string(),
                self.log2_t[i].to_string(),
                self.loss[i].to_string(),
                self.grad[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loss and `log2 t` gradient of one batch.
pub fn l2_loss_and_grad(x: &Tensor64, q: &Quantizer64) -> Result<(f64, f64)> {
    let y = quantize_forward(x, q);
    let n = x.len() as f64;
    let err = y.sub(x)?;
    let loss = err.data().iter().map(|e| e * e).sum::<f64>() / (2.0 * n);
    let upstream = err.scale(1.0 / n);
    let (_, g) = quantize_backward(x, q, &upstream)?;
    Ok((loss, g))
}

fn gaussian(sigma: f64) -> impl FnMut(&mut Rng, usize) -> Tensor64 {
    move |rng, n| rng.normal_tensor(&[n], sigma)
}

/// Runs the toy problem on `Gaussian(0, sigma)` inputs.
pub fn toy_l2_run(cfg: &ToyRunConfig) -> Result<Trajectory> {
    toy_run_with(cfg, gaussian(cfg.sigma))
}

/// Runs the toy problem with a caller-supplied sampler.
pub fn toy_run_with(cfg: &ToyRunConfig, mut sample: impl FnMut(&mut Rng, usize) -> Tensor64) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut log2_t = match cfg.init_log2_t {
        Some(v) => v,
        None => calib_max(&sample(&mut rng, cfg.batch))?.log2(),
    };
    let mut adam = AdamState::new(1, cfg.alpha, cfg.beta1, cfg.beta2, cfg.eps);
    let mut normed = NormedGradState::new(cfg.beta2, cfg.eps);
    let mut traj = Trajectory::default();

    for step in 0..cfg.steps {
        if !log2_t.is_finite() || log2_t.abs() > DIVERGENCE_LIMIT {
            traj.diverged = Some(step);
            break;
        }
        let x = sample(&mut rng, cfg.batch);
        let q = Quantizer64::new(cfg.bits, cfg.signed, log2_t)?;
        let (loss, g) = l2_loss_and_grad(&x, &q)?;
        traj.log2_t.push(log2_t);
        traj.loss.push(loss);
        traj.grad.push(g);

        log2_t = match cfg.optimizer {
            ToyOptimizer::RawSgd => {
                // dL/dt = dL/dlog2(t) / (t ln 2)
                let t = log2_t.exp2();
                let t = t - cfg.alpha * g / (t * std::f64::consts::LN_2);
                if t > 0.0 {
                    t.log2()
                } else {
                    f64::NEG_INFINITY
                }
            }
            ToyOptimizer::LogSgd => log2_t - cfg.alpha * g,
            ToyOptimizer::LogAdam => log2_t + adam.step(&[g])?[0],
            ToyOptimizer::NormedLogSgd => log2_t - cfg.alpha * normed.normed_grad(g),
        };
    }
    Ok(traj)
}

/// Post-convergence oscillation statistics around the critical boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct OscillationReport {
    /// The integer `log2 t*` the tail oscillates around.
    pub boundary: i64,
    /// Mean gap between upward crossings of the boundary.
    pub period: f64,
    /// Mean gradient below the boundary (negative at convergence).
    pub g_low: f64,
    /// Mean gradient above the boundary (positive at convergence).
    pub g_high: f64,
    /// `-g_low / g_high`.
    pub r_g: f64,
    /// Largest `|log2 t - boundary|` in the tail.
    pub max_deviation: f64,
    pub crossings: usize,
    /// False when the tail wanders more than one unit from its median or
    /// shows fewer than two upward crossings.
    pub reliable: bool,
}

/// Analyzes the last [`TAIL_FRACTION`] of a trajectory.
pub fn measure_oscillation(traj: &Trajectory) -> OscillationReport {
    let n = traj.len();
    let start = n - ((n as f64 * TAIL_FRACTION).round() as usize).min(n);
    let tail = &traj.log2_t[start..];
    let grads = &traj.grad[start..];

    let mut sorted = tail.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted.get(sorted.len() / 2).copied().unwrap_or(f64::NAN);
    let settled = !tail.is_empty() && tail.iter().all(|v| (v - median).abs() <= 1.0);

    // Upward crossing of integer k between consecutive samples a <= k < b.
    let ups = |k: f64| -> Vec<usize> {
        (1..tail.len())
            .filter(|&i| tail[i - 1] <= k && tail[i] > k)
            .collect()
    };
    let boundary = if tail.is_empty() {
        0
    } else {
        let lo = sorted[0].floor() as i64;
        let hi = sorted[sorted.len() - 1].ceil() as i64;
        let fallback = median.round() as i64;
        (lo..=hi)
            .map(|k| (ups(k as f64).len(), -(k - fallback).abs(), k))
            .max()
            .map(|(_, _, k)| k)
            .unwrap_or(fallback)
    };
    let b = boundary as f64;
    let crossings = ups(b);
    let period = if crossings.len() >= 2 {
        (crossings[crossings.len() - 1] - crossings[0]) as f64 / (crossings.len() - 1) as f64
    } else {
        tail.len().max(1) as f64
    };

    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (s, c) = it.fold((0.0, 0usize), |(s, c), g| (s + g, c + 1));
        if c == 0 {
            f64::NAN
        } else {
            s / c as f64
        }
    };
    let g_low = mean(&mut tail.iter().zip(grads).filter(|(v, _)| **v <= b).map(|(_, g)| *g));
    let g_high = mean(&mut tail.iter().zip(grads).filter(|(v, _)| **v > b).map(|(_, g)| *g));
    let r_g = -g_low / g_high;
    let max_deviation = tail.iter().map(|v| (v - b).abs()).fold(0.0, f64::max);

    OscillationReport {
        boundary,
        period,
        g_low,
        g_high,
        r_g,
        max_deviation,
        crossings: crossings.len(),
        reliable: settled && crossings.len() >= 2 && r_g.is_finite() && r_g > 0.0,
    }
}

/// First step from which the trajectory stays within one unit of
/// `boundary` until the end.
pub fn convergence_step(traj: &Trajectory, boundary: i64) -> Option<usize> {
    let b = boundary as f64;
    match traj.log2_t.iter().rposition(|v| (v - b).abs() > 1.0) {
        None => Some(0),
        Some(i) if i + 1 < traj.len() => Some(i + 1),
        Some(_) => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierKind {
    /// Outliers drawn from `Gaussian(0, outlier_scale · sigma)`.
    Gaussian,
    /// Outliers at exactly `±outlier_scale · sigma`.
    PointMass,
}

/// Gaussian body with a sparse, much wider outlier component.
#[derive(Debug, Clone, PartialEq)]
pub struct HeavyTailConfig {
    pub sigma: f64,
    /// Probability that a sample comes from the outlier component.
    pub outlier_rate: f64,
    /// Outlier magnitude in units of `sigma`.
    pub outlier_scale: f64,
    pub outliers: OutlierKind,
    pub bits: u32,
    pub batch: usize,
    pub steps: usize,
    /// Adam step size. Both quantizers train log-domain parameters with
    /// the same optimizer, so only their gradient definitions differ.
    pub alpha: f64,
    /// Held-out samples for the final loss.
    pub eval_samples: usize,
    pub seed: u64,
}

impl HeavyTailConfig {
    pub fn new(outlier_rate: f64, outlier_scale: f64) -> Self {
        HeavyTailConfig {
            sigma: 1.0,
            outlier_rate,
            outlier_scale,
            outliers: OutlierKind::Gaussian,
            bits: 8,
            batch: 1000,
            steps: 2000,
            alpha: 0.1,
            eval_samples: 200_000,
            seed: 0,
        }
    }

    /// Inputs drawn only from the outlier component.
    pub fn outliers_only(outlier_scale: f64) -> Self {
        HeavyTailConfig {
            outlier_rate: 1.0,
            ..Self::new(1.0, outlier_scale)
        }
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Tensor64 {
        let data = (0..n)
            .map(|_| {
                let z = rng.normal();
                if rng.uniform() < self.outlier_rate {
                    let z = match self.outliers {
                        OutlierKind::Gaussian => z,
                        OutlierKind::PointMass => z.signum(),
                    };
                    z * self.sigma * self.outlier_scale
                } else {
                    z * self.sigma
                }
            })
            .collect();
        Tensor64::from_vec(data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClippedVsTqt {
    pub loss_tqt: f64,
    pub loss_clipped: f64,
    /// Trained `t = 2^log2_t` of the power-of-2 quantizer.
    pub t_tqt: f64,
    /// Trained `max(|n|, p)` of the clipped baseline.
    pub t_clipped: f64,
    /// Largest `|x|` seen during training.
    pub max_abs: f64,
    pub tqt: Trajectory,
}

fn clipped_l2(x: &Tensor64, n: f64, p: f64, bits: u32) -> Result<(f64, f64, f64)> {
    let fq = fakequant_clipped(x, n, p, bits)?;
    let len = x.len() as f64;
    let err = fq.y.sub(x)?;
    let loss = err.data().iter().map(|e| e * e).sum::<f64>() / (2.0 * len);
    let gn = err.data().iter().zip(fq.grad_n.data()).map(|(e, d)| e * d).sum::<f64>() / len;
    let gp = err.data().iter().zip(fq.grad_p.data()).map(|(e, d)| e * d).sum::<f64>() / len;
    Ok((loss, gn, gp))
}

/// Trains a power-of-2 quantizer and a clipped-gradient FakeQuant on the
/// same stream of heavy-tailed batches and scores them on a held-out sample.
///
/// Both start from the max of the first batch. The FakeQuant limits are
/// parametrized as `n = -2^a`, `p = 2^c` and `a`, `c` get the same Adam
/// settings as `log2 t`.
pub fn compare_clipped_vs_tqt(cfg: &HeavyTailConfig) -> Result<ClippedVsTqt> {
    let mut rng = Rng::new(cfg.seed);
    let first = cfg.sample(&mut rng, cfg.batch);
    let t0 = calib_max(&first)?;
    let mut max_abs = t0;

    let mut log2_t = t0.log2();
    let mut adam_t = AdamState::new(1, cfg.alpha, 0.9, 0.999, 1e-12);
    let (mut log_n, mut log_p) = (t0.log2(), t0.log2());
    let mut adam_np = AdamState::new(2, cfg.alpha, 0.9, 0.999, 1e-12);
    let mut traj = Trajectory::default();

    for step in 0..cfg.steps {
        let x = if step == 0 { first.clone() } else { cfg.sample(&mut rng, cfg.batch) };
        max_abs = max_abs.max(x.max_abs());

        let q = Quantizer64::new(cfg.bits, true, log2_t)?;
        let (loss, g) = l2_loss_and_grad(&x, &q)?;
        traj.log2_t.push(log2_t);
        traj.loss.push(loss);
        traj.grad.push(g);
        log2_t += adam_t.step(&[g])?[0];

        let (n, p) = (-log_n.exp2(), log_p.exp2());
        let (_, gn, gp) = clipped_l2(&x, n, p, cfg.bits)?;
        let ln2 = std::f64::consts::LN_2;
        let upd = adam_np.step(&[gn * n * ln2, gp * p * ln2])?;
        log_n += upd[0];
        log_p += upd[1];
    }
    let (n, p) = (-log_n.exp2(), log_p.exp2());

    let eval = cfg.sample(&mut rng, cfg.eval_samples);
    let q = Quantizer64::new(cfg.bits, true, log2_t)?;
    let (loss_tqt, _) = l2_loss_and_grad(&eval, &q)?;
    let (loss_clipped, _, _) = clipped_l2(&eval, n, p, cfg.bits)?;
    Ok(ClippedVsTqt {
        loss_tqt,
        loss_clipped,
        t_tqt: log2_t.exp2(),
        t_clipped: p.max(-n),
        max_abs,
        tqt: traj,
    })
}
