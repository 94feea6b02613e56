//! Threshold calibration: max, n standard deviations, percentile and KL-J.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Threshold returned for all-zero data, so that `log2 t` stays finite.
pub const ZERO_FALLBACK: f64 = 1.0 / 1024.0;

/// Smoothing added inside the logarithms of the KL terms.
pub const KL_EPS: f64 = 1e-12;

pub const DEFAULT_BINS: usize = 1024;

/// Magnitude histogram over `[0, max|x|]` with running moments of the signed
/// values.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    counts: Vec<u64>,
    range: f64,
    samples: u64,
    mean: f64,
    m2: f64,
}

impl Histogram {
    pub fn from_data<T: Real>(data: &[T], bins: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Contract("histogram of empty data".into()));
        }
        if bins == 0 {
            return Err(Error::Contract("histogram needs at least one bin".into()));
        }
        let range = data.iter().fold(0.0f64, |m, v| m.max(v.to_f64_lossy().abs()));
        let mut counts = vec![0u64; bins];
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, v) in data.iter().enumerate() {
            let v = v.to_f64_lossy();
            let k = (i + 1) as f64;
            let d = v - mean;
            mean += d / k;
            m2 += d * (v - mean);
            if range > 0.0 {
                let b = ((v.abs() / range) * bins as f64) as usize;
                counts[b.min(bins - 1)] += 1;
            } else {
                counts[0] += 1;
            }
        }
        Ok(Histogram {
            counts,
            range,
            samples: data.len() as u64,
            mean,
            m2,
        })
    }

    /// Histogram from explicit counts over `[0, range]`; moments unknown.
    pub fn from_counts(counts: Vec<u64>, range: f64) -> Result<Self> {
        if counts.is_empty() || !(range > 0.0) {
            return Err(Error::Contract("histogram needs bins and a positive range".into()));
        }
        let samples = counts.iter().sum();
        Ok(Histogram {
            counts,
            range,
            samples,
            mean: f64::NAN,
            m2: f64::NAN,
        })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn bin_width(&self) -> f64 {
        self.range / self.counts.len() as f64
    }

    /// Upper edge of bin `i`.
    pub fn edge(&self, i: usize) -> f64 {
        self.bin_width() * (i + 1) as f64
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        self.m2 / self.samples as f64
    }
}

pub fn calib_max<T: Real>(x: &Tensor<T>) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Contract("calibration of empty tensor".into()));
    }
    let m = x.max_abs().to_f64_lossy();
    Ok(if m > 0.0 { m } else { ZERO_FALLBACK })
}

/// `nsd` population standard deviations about the mean.
pub fn calib_nsd<T: Real>(x: &Tensor<T>, nsd: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Contract("calibration of empty tensor".into()));
    }
    let h = Histogram::from_data(x.data(), 1)?;
    Ok((nsd * h.variance().sqrt()).max(ZERO_FALLBACK))
}

/// Nearest-rank percentile of `|x|`, `pct` in `(0, 100]`.
pub fn calib_percentile<T: Real>(x: &Tensor<T>, pct: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Contract("calibration of empty tensor".into()));
    }
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::Contract(format!("percentile {pct} outside (0, 100]")));
    }
    let mut mags: Vec<f64> = x.data().iter().map(|v| v.to_f64_lossy().abs()).collect();
    mags.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * mags.len() as f64).ceil() as usize;
    Ok(mags[rank.clamp(1, mags.len()) - 1].max(ZERO_FALLBACK))
}

/// `J(P, Q) = KL(P || Q) + KL(Q || P)` of two distributions of equal length,
/// smoothed with [`KL_EPS`] inside the logarithms.
pub fn kl_j(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (la, lb) = ((a + KL_EPS).ln(), (b + KL_EPS).ln());
            a * (la - lb) + b * (lb - la)
        })
        .sum()
}

/// Distribution seen after quantizing with a threshold at the upper edge of
/// bin `keep - 1` into `levels` uniform levels, as a normalized vector over
/// all bins.
pub fn simulated_quantized(counts: &[u64], keep: usize, levels: usize) -> Vec<f64> {
    let bins = counts.len();
    let mut reference: Vec<f64> = counts[..keep].iter().map(|&c| c as f64).collect();
    let clipped: f64 = counts[keep..].iter().map(|&c| c as f64).sum();
    reference[keep - 1] += clipped;

    let mut q = vec![0.0; bins];
    if levels >= keep {
        // Every level spans at most one bin, so the simulation reproduces
        // the reference.
        let total: f64 = reference.iter().sum();
        for (d, r) in q.iter_mut().zip(&reference) {
            *d = r / total;
        }
        return q;
    }
    for level in 0..levels {
        let lo = level * keep / levels;
        let hi = (level + 1) * keep / levels;
        if lo == hi {
            continue;
        }
        let mass: f64 = reference[lo..hi].iter().sum();
        let nonzero = reference[lo..hi].iter().filter(|&&c| c > 0.0).count();
        if nonzero == 0 {
            continue;
        }
        let share = mass / nonzero as f64;
        for j in lo..hi {
            if reference[j] > 0.0 {
                q[j] = share;
            }
        }
    }
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    q
}

/// Number of quantization levels covering the magnitude range.
pub fn magnitude_levels(bits: u32, signed: bool) -> usize {
    1usize << (bits - u32::from(signed))
}

/// Threshold minimizing the KL-J distance between the histogram and its
/// quantized simulation. Ties resolve to the smallest threshold.
pub fn calib_klj(h: &Histogram, bits: u32, signed: bool) -> Result<f64> {
    Ok(klj_scan(h, bits, signed)?.0)
}

/// Like [`calib_klj`] but also returns the `J` value of every candidate,
/// indexed by bin.
pub fn klj_scan(h: &Histogram, bits: u32, signed: bool) -> Result<(f64, Vec<f64>)> {
    if h.samples() == 0 || h.counts().iter().all(|&c| c == 0) {
        return Err(Error::Contract("KL-J calibration of an empty histogram".into()));
    }
    if h.range() == 0.0 {
        return Ok((ZERO_FALLBACK, vec![0.0]));
    }
    let total = h.samples() as f64;
    let p: Vec<f64> = h.counts().iter().map(|&c| c as f64 / total).collect();
    let levels = magnitude_levels(bits, signed);
    let mut js = Vec::with_capacity(h.bins());
    let mut best = (f64::INFINITY, 0usize);
    for keep in 1..=h.bins() {
        let q = simulated_quantized(h.counts(), keep, levels);
        let j = kl_j(&p, &q);
        if j < best.0 {
            best = (j, keep);
        }
        js.push(j);
    }
    Ok((h.edge(best.1 - 1), js))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibMethod {
    Max,
    StdDev(f64),
    Percentile(f64),
    KlJ,
}

impl fmt::Display for CalibMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibMethod::Max => f.write_str("max"),
            CalibMethod::StdDev(n) => write!(f, "{n}sd"),
            CalibMethod::Percentile(p) => write!(f, "p{p}"),
            CalibMethod::KlJ => f.write_str("klj"),
        }
    }
}

impl CalibMethod {
    pub fn calibrate<T: Real>(&self, x: &Tensor<T>, bits: u32, signed: bool) -> Result<f64> {
        match *self {
            CalibMethod::Max => calib_max(x),
            CalibMethod::StdDev(n) => calib_nsd(x, n),
            CalibMethod::Percentile(p) => calib_percentile(x, p),
            CalibMethod::KlJ => {
                let h = Histogram::from_data(x.data(), DEFAULT_BINS)?;
                calib_klj(&h, bits, signed)
            }
        }
    }
}

/// Quantization workflow, which decides how thresholds start out and what
/// gets trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Static,
    RetrainWt,
    RetrainWtTh,
}

impl Mode {
    pub fn trains_weights(self) -> bool {
        self != Mode::Static
    }

    pub fn trains_thresholds(self) -> bool {
        self == Mode::RetrainWtTh
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Static => "static",
            Mode::RetrainWt => "retrain-wt",
            Mode::RetrainWtTh => "retrain-wt-th",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Mode::Static),
            "retrain-wt" => Ok(Mode::RetrainWt),
            "retrain-wt-th" => Ok(Mode::RetrainWtTh),
            other => Err(Error::Contract(format!("unknown mode '{other}'"))),
        }
    }
}

/// Initialization methods for weight and activation thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitPolicy {
    pub weights: CalibMethod,
    pub activations: CalibMethod,
}

pub fn init_thresholds(mode: Mode) -> InitPolicy {
    let weights = match mode {
        Mode::Static | Mode::RetrainWt => CalibMethod::Max,
        Mode::RetrainWtTh => CalibMethod::StdDev(3.0),
    };
    InitPolicy {
        weights,
        activations: CalibMethod::KlJ,
    }
}

/// One row of the calibration report.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibRecord {
    pub tensor: String,
    pub method: String,
    pub threshold: f64,
    pub bits: u32,
    pub signed: bool,
}

pub fn write_calib_report<W: Write>(out: W, rows: &[CalibRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["tensor", "method", "t", "log2_t", "b", "signed"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.tensor.clone(),
            r.method.clone(),
            format!("{:e}", r.threshold),
            format!("{}", r.threshold.log2()),
            r.bits.to_string(),
            r.signed.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn max_examples() {
        assert_eq!(calib_max(&Tensor::from_vec(vec![-3.0, 1.0, 2.0])).unwrap(), 3.0);
        assert_eq!(calib_max(&Tensor::from_vec(vec![0.0, 0.0])).unwrap(), ZERO_FALLBACK);
        let x: Tensor<f64> = Rng::new(1).normal_tensor(&[10_000], 0.5);
        let t = calib_max(&x).unwrap();
        assert!((1.5..=3.0).contains(&t), "{t}");
    }

    #[test]
    fn nsd_examples() {
        assert_eq!(calib_nsd(&Tensor::full(&[5], 2.0), 3.0).unwrap(), ZERO_FALLBACK);
        assert!((calib_nsd(&Tensor::from_vec(vec![-1.0, 1.0]), 3.0).unwrap() - 3.0).abs() < 1e-15);
        let x: Tensor<f64> = Rng::new(2).normal_tensor(&[100_000], 1.0);
        assert!((calib_nsd(&x, 3.0).unwrap() - 3.0).abs() < 0.1);
    }

    #[test]
    fn percentile_nearest_rank() {
        let x = Tensor::from_vec((1..=100).map(f64::from).collect());
        assert_eq!(calib_percentile(&x, 99.0).unwrap(), 99.0);
        assert_eq!(calib_percentile(&x, 100.0).unwrap(), 100.0);
        assert!(calib_percentile(&x, 0.0).is_err());
    }

    #[test]
    fn single_bin_mass_gives_its_edge_with_zero_j() {
        let mut counts = vec![0u64; 64];
        counts[17] = 500;
        let h = Histogram::from_counts(counts, 64.0).unwrap();
        let (t, js) = klj_scan(&h, 8, true).unwrap();
        assert_eq!(t, 18.0);
        assert!(js[17].abs() < 1e-15);
    }

    #[test]
    fn uniform_histogram_keeps_full_range() {
        let h = Histogram::from_counts(vec![100; DEFAULT_BINS], 1.0).unwrap();
        assert_eq!(calib_klj(&h, 8, true).unwrap(), 1.0);
    }

    #[test]
    fn gaussian_histogram_clips_the_tail() {
        let x: Tensor<f64> = Rng::new(3).normal_tensor(&[100_000], 1.0);
        let h = Histogram::from_data(x.data(), DEFAULT_BINS).unwrap();
        let t = calib_klj(&h, 8, true).unwrap();
        assert!(t < x.max_abs(), "t = {t}, max = {}", x.max_abs());
    }

    #[test]
    fn klj_invariant_to_mass_scaling() {
        let x: Tensor<f64> = Rng::new(4).normal_tensor(&[20_000], 1.0);
        let h = Histogram::from_data(x.data(), 256).unwrap();
        let scaled =
            Histogram::from_counts(h.counts().iter().map(|c| c * 7).collect(), h.range()).unwrap();
        assert_eq!(calib_klj(&h, 4, true).unwrap(), calib_klj(&scaled, 4, true).unwrap());
    }

    #[test]
    fn fine_levels_reproduce_the_clipped_reference() {
        let counts = [3u64, 0, 5, 1, 0, 2, 7];
        // keep = 5: the last kept bin absorbs the two clipped bins.
        let reference = [3.0, 0.0, 5.0, 1.0, 9.0];
        let total: f64 = reference.iter().sum();
        for levels in [5, 6, 64] {
            let q = simulated_quantized(&counts, 5, levels);
            for (j, &v) in q.iter().enumerate() {
                let expect = reference.get(j).map_or(0.0, |r| r / total);
                assert!((v - expect).abs() < 1e-15, "levels {levels}, bin {j}");
            }
        }
        // Two levels over five bins: [0, 2) and [2, 5).
        let q = simulated_quantized(&counts, 5, 2);
        let expect = [3.0, 0.0, 5.0, 5.0, 5.0].map(|v| v / 18.0);
        for (a, b) in q.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn klj_rejects_empty() {
        let h = Histogram::from_counts(vec![0; 8], 1.0).unwrap();
        assert!(calib_klj(&h, 8, true).is_err());
    }

    #[test]
    fn j_is_non_negative_and_zero_on_identity() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let mut p: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
            let mut q: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
            let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
            p.iter_mut().for_each(|v| *v /= sp);
            q.iter_mut().for_each(|v| *v /= sq);
            assert!(kl_j(&p, &q) >= 0.0);
            assert_eq!(kl_j(&p, &p), 0.0);
        }
    }

    #[test]
    fn policy_table() {
        let p = |m| {
            let InitPolicy { weights, activations } = init_thresholds(m);
            (weights, activations)
        };
        assert_eq!(p(Mode::Static), (CalibMethod::Max, CalibMethod::KlJ));
        assert_eq!(p(Mode::RetrainWt), (CalibMethod::Max, CalibMethod::KlJ));
        assert_eq!(p(Mode::RetrainWtTh), (CalibMethod::StdDev(3.0), CalibMethod::KlJ));
    }

    #[test]
    fn report_layout() {
        let mut buf = Vec::new();
        write_calib_report(
            &mut buf,
            &[CalibRecord {
                tensor: "conv1/act".into(),
                method: "klj".into(),
                threshold: 4.0,
                bits: 8,
                signed: false,
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "tensor,method,t,log2_t,b,signed\nconv1/act,klj,4e0,2,8,false\n"
        );
    }
}
