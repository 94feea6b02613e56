//! Comparison of the integer path against emulated quantization.

use std::fmt;

use tqt_core::{Rng, Tensor64};
use tqt_graph::{forward, ExecOptions, Model};

use crate::error::{Result, RuntimeError};
use crate::exec::execute_trace;
use crate::fixed::FixedPointTensor;
use crate::lowered::{IntOp, LoweredGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub trial: usize,
    /// First node, in evaluation order, whose integers differ.
    pub node: String,
    pub index: usize,
    /// Emulated value divided by the node's scale.
    pub emulated: f64,
    pub integer: i64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BitexactReport {
    pub trials: usize,
    /// Nodes present in both graphs, compared on every trial.
    pub nodes_compared: usize,
    /// Trials with at least one differing integer.
    pub failed_trials: usize,
    pub first: Option<Mismatch>,
}

impl BitexactReport {
    pub fn is_exact(&self) -> bool {
        self.failed_trials == 0
    }
}

impl fmt::Display for BitexactReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.first {
            None => write!(
                f,
                "bit-exact: {} trials, {} nodes compared, 0 mismatches",
                self.trials, self.nodes_compared
            ),
            Some(m) => write!(
                f,
                "{} of {} trials differ; first at node '{}' (trial {}, element {}): emulated {} vs integer {}",
                self.failed_trials, self.trials, m.node, m.trial, m.index, m.emulated, m.integer
            ),
        }
    }
}

/// Quantizes real inputs onto the grid of the lowered graph's inputs.
/// `inputs` follow the model's input order.
pub fn quantize_inputs(model: &Model, lg: &LoweredGraph, inputs: &[Tensor64]) -> Result<Vec<FixedPointTensor>> {
    let order = model.graph.inputs();
    lg.inputs()
        .iter()
        .map(|n| {
            let k = order
                .iter()
                .position(|i| *i == n.id)
                .ok_or_else(|| RuntimeError::invalid(&n.id, "input missing from the model"))?;
            let (bits, signed) = n.op.bits();
            FixedPointTensor::quantize(&inputs[k], n.f, bits, signed)
        })
        .collect()
}

/// Runs both paths on every input set and compares, for each node the two
/// graphs share, the emulated value `v · 2^f` against the integer.
pub fn bitexact_check(model: &Model, lg: &LoweredGraph, trials: &[Vec<Tensor64>]) -> Result<BitexactReport> {
    let mut report = BitexactReport {
        trials: trials.len(),
        ..BitexactReport::default()
    };
    for (t, inputs) in trials.iter().enumerate() {
        let emulated = forward(model, inputs, &ExecOptions::quantized())?;
        let ints = execute_trace(lg, &quantize_inputs(model, lg, inputs)?)?;
        let mut compared = 0;
        let mut found = None;
        for n in &lg.nodes {
            // Inputs enter already quantized; their emulated counterpart is
            // the input quantizer, compared where it is consumed.
            if matches!(n.op, IntOp::Input { .. }) {
                continue;
            }
            let Some(ev) = emulated.value(&n.id) else { continue };
            compared += 1;
            let scale = (n.f as f64).exp2();
            let iv = &ints[&n.id];
            if ev.shape() != iv.shape() {
                return Err(RuntimeError::invalid(&n.id, "emulated and integer shapes differ"));
            }
            let bad = ev
                .data()
                .iter()
                .zip(iv.data())
                .position(|(&e, &k)| e * scale != k as f64);
            if let Some(i) = bad {
                found = Some(Mismatch {
                    trial: t,
                    node: n.id.clone(),
                    index: i,
                    emulated: ev.data()[i] * scale,
                    integer: iv.data()[i] as i64,
                });
                break;
            }
        }
        report.nodes_compared = compared;
        if let Some(m) = found {
            report.failed_trials += 1;
            report.first.get_or_insert(m);
        }
    }
    Ok(report)
}

/// `trials` input sets of normal samples with the given shapes.
pub fn random_inputs(rng: &mut Rng, shapes: &[Vec<usize>], trials: usize, std: f64) -> Vec<Vec<Tensor64>> {
    (0..trials)
        .map(|_| shapes.iter().map(|s| rng.normal_tensor(s, std)).collect())
        .collect()
}
