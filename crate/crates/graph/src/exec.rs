//! Real-valued execution of a [`Model`] on a differentiation tape.
//!
//! The same routine serves float inference, emulated quantized inference
//! (quantize nodes active) and training (constants and/or thresholds
//! recorded as trainable leaves).

use std::collections::{BTreeMap, BTreeSet};

use tqt_core::quant::{quantize_fused, quantize_unfused};
use tqt_core::{Tape64, Tensor64, Var};

use crate::error::{GraphError, Result};
use crate::ir::Op;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BnMode {
    /// Normalize with the stored moving statistics.
    #[default]
    Moving,
    /// Normalize with the statistics of the current batch.
    Batch,
}

#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    /// Apply quantize nodes; when false they pass values through.
    pub quantize: bool,
    /// Only these groups quantize; `None` means all.
    pub active_groups: Option<BTreeSet<String>>,
    pub train_weights: bool,
    pub train_thresholds: bool,
    pub bn: BnMode,
    /// Build quantizers from primitives instead of the fused node.
    pub unfused: bool,
}

impl ExecOptions {
    pub fn float() -> Self {
        Self::default()
    }

    pub fn quantized() -> Self {
        ExecOptions {
            quantize: true,
            ..Self::default()
        }
    }
}

pub struct Forward {
    pub tape: Tape64,
    /// Output variable of every evaluated node.
    pub values: BTreeMap<String, Var>,
    pub outputs: Vec<Var>,
    /// Const node id to its leaf, for trainable constants only.
    pub params: BTreeMap<String, Var>,
    /// Group name to its `log2 t` leaf.
    pub thresholds: BTreeMap<String, Var>,
    /// Batch statistics used by batch-norm nodes in [`BnMode::Batch`].
    pub bn_stats: Vec<(String, Tensor64, Tensor64)>,
}

impl Forward {
    pub fn value(&self, id: &str) -> Option<&Tensor64> {
        self.values.get(id).map(|&v| self.tape.value(v))
    }

    pub fn output(&self, i: usize) -> &Tensor64 {
        self.tape.value(self.outputs[i])
    }
}

pub fn forward(model: &Model, inputs: &[Tensor64], opts: &ExecOptions) -> Result<Forward> {
    let g = &model.graph;
    let input_ids = g.inputs();
    if input_ids.len() != inputs.len() {
        return Err(GraphError::invalid(
            "<inputs>",
            format!("graph has {} inputs, {} supplied", input_ids.len(), inputs.len()),
        ));
    }
    let mut f = Forward {
        tape: Tape64::new(),
        values: BTreeMap::new(),
        outputs: Vec::new(),
        params: BTreeMap::new(),
        thresholds: BTreeMap::new(),
        bn_stats: Vec::new(),
    };
    for id in g.topo_order()? {
        let node = g.node(&id).unwrap();
        let ins: Vec<Var> = node.inputs.iter().map(|i| f.values[i]).collect();
        let wrap = |e: tqt_core::Error| GraphError::Exec {
            node: id.clone(),
            source: e,
        };
        let t = &mut f.tape;
        let out = match &node.op {
            Op::Input => {
                let k = input_ids.iter().position(|i| *i == id).unwrap();
                t.constant(inputs[k].clone())
            }
            Op::Const { fixed, .. } => {
                let value = model.const_tensor(&id)?.clone();
                if opts.train_weights && !fixed {
                    let v = t.param(value);
                    f.params.insert(id.clone(), v);
                    v
                } else {
                    t.constant(value)
                }
            }
            Op::Conv2d { stride, pad } => t.conv2d(ins[0], ins[1], *stride, *pad).map_err(wrap)?,
            Op::DepthwiseConv2d { stride, pad, .. } => {
                t.depthwise_conv2d(ins[0], ins[1], *stride, *pad).map_err(wrap)?
            }
            Op::MatMul => t.matmul(ins[0], ins[1]).map_err(wrap)?,
            Op::BiasAdd => t.bias_add(ins[0], ins[1]).map_err(wrap)?,
            Op::BatchNorm { eps } => match opts.bn {
                BnMode::Batch => {
                    let (y, mean, var) =
                        t.batch_norm_train(ins[0], ins[1], ins[2], *eps).map_err(wrap)?;
                    f.bn_stats.push((id.clone(), mean, var));
                    y
                }
                BnMode::Moving => batch_norm_moving(t, &ins, *eps).map_err(wrap)?,
            },
            Op::Relu => t.relu(ins[0]),
            Op::Relu6 => t.relu6(ins[0]),
            Op::LeakyRelu { alpha } => t.leaky_relu(ins[0], *alpha),
            Op::AvgPool { k, stride } => t.avg_pool(ins[0], *k, *stride).map_err(wrap)?,
            Op::EltwiseAdd => t.add(ins[0], ins[1]).map_err(wrap)?,
            Op::Concat => t.concat(&ins).map_err(wrap)?,
            Op::Maximum => t.maximum(ins[0], ins[1]).map_err(wrap)?,
            Op::Mul => {
                let shape = t.value(ins[1]).shape().to_vec();
                let b = t.broadcast(ins[0], &shape).map_err(wrap)?;
                t.mul(b, ins[1]).map_err(wrap)?
            }
            Op::Flatten => {
                let s = t.value(ins[0]).shape().to_vec();
                let rest: usize = s[1..].iter().product();
                t.reshape(ins[0], &[s[0], rest]).map_err(wrap)?
            }
            Op::Identity => ins[0],
            Op::Quantize { bits, signed, group } => {
                let active = opts.quantize
                    && opts.active_groups.as_ref().is_none_or(|a| a.contains(group));
                if active {
                    let l = match f.thresholds.get(group) {
                        Some(&l) => l,
                        None => {
                            let log2_t = *model.thresholds.get(group).ok_or_else(|| {
                                GraphError::invalid(&id, format!("group '{group}' has no threshold"))
                            })?;
                            let v = Tensor64::scalar(log2_t);
                            let l = if opts.train_thresholds { t.param(v) } else { t.constant(v) };
                            f.thresholds.insert(group.clone(), l);
                            l
                        }
                    };
                    let t = &mut f.tape;
                    if opts.unfused {
                        quantize_unfused(t, ins[0], l, *bits, *signed).map_err(wrap)?
                    } else {
                        quantize_fused(t, ins[0], l, *bits, *signed).map_err(wrap)?
                    }
                } else {
                    ins[0]
                }
            }
        };
        f.values.insert(id, out);
    }
    f.outputs = g.outputs.iter().map(|o| f.values[o]).collect();
    Ok(f)
}

/// Inference-mode batch norm, `(x - mean) · gamma / sqrt(var + eps) + beta`,
/// differentiable in `x`, `gamma` and `beta`.
fn batch_norm_moving(t: &mut Tape64, ins: &[Var], eps: f64) -> tqt_core::Result<Var> {
    let x = t.value(ins[0]).clone();
    let c = *x.shape().last().unwrap_or(&0);
    for &p in &ins[1..] {
        t.value(p).expect_shape(&[c], "batch_norm")?;
    }
    let gamma = t.value(ins[1]).data().to_vec();
    let beta = t.value(ins[2]).data().to_vec();
    let mean = t.value(ins[3]).data().to_vec();
    let inv_std: Vec<f64> = t.value(ins[4]).data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            row[ch] = (row[ch] - mean[ch]) * inv_std[ch] * gamma[ch] + beta[ch];
        }
    }
    Ok(t.custom(ins, y, move |ctx| {
        let x = ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let dy = ctx.upstream;
        let mut dx = dy.clone();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (row, (xr, gr)) in dx
            .data_mut()
            .chunks_exact_mut(c)
            .zip(x.data().chunks_exact(c).zip(dy.data().chunks_exact(c)))
        {
            for ch in 0..c {
                row[ch] = gr[ch] * gamma[ch] * inv_std[ch];
                dgamma[ch] += gr[ch] * (xr[ch] - mean[ch]) * inv_std[ch];
                dbeta[ch] += gr[ch];
            }
        }
        Ok(vec![
            Some(dx),
            Some(Tensor64::from_vec(dgamma)),
            Some(Tensor64::from_vec(dbeta)),
            None,
            None,
        ])
    }))
}

/// Forward pass returning only the graph outputs.
pub fn infer(model: &Model, inputs: &[Tensor64], opts: &ExecOptions) -> Result<Vec<Tensor64>> {
    let f = forward(model, inputs, opts)?;
    Ok(f.outputs.iter().map(|&v| f.tape.value(v).clone()).collect())
}
