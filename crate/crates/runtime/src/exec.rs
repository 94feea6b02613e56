//! Integer-only evaluation of a [`LoweredGraph`].

use std::collections::HashMap;

use tqt_core::ops::concat;
use tqt_core::IntTensor;

use crate::error::{Result, RuntimeError};
use crate::fixed::{int_limits, shift_round, FixedPointTensor, ACC_BITS};
use crate::kernels;
use crate::lowered::{IntOp, LoweredGraph};

fn requant(node: &str, x: &IntTensor, shift: i32, bits: u32, signed: bool) -> Result<IntTensor> {
    let (n, p) = int_limits(bits, signed);
    let mut out = Vec::with_capacity(x.len());
    for &v in x.data() {
        let r = shift_round(v as i64, shift);
        if bits == ACC_BITS && (r < n as i128 || r > p as i128) {
            return Err(RuntimeError::Overflow {
                node: node.to_string(),
                detail: format!("{v} shifted by {shift} exceeds 32 bits"),
            });
        }
        out.push(r.clamp(n as i128, p as i128) as i32);
    }
    Ok(IntTensor::new(x.shape().to_vec(), out)?)
}

/// Runs the graph and returns the value of every node, keyed by id.
/// `inputs` follow the order of [`LoweredGraph::inputs`] and must carry
/// exactly the declared fractional length and width.
pub fn execute_trace(lg: &LoweredGraph, inputs: &[FixedPointTensor]) -> Result<HashMap<String, IntTensor>> {
    let declared = lg.inputs();
    if declared.len() != inputs.len() {
        return Err(RuntimeError::invalid(
            "<inputs>",
            format!("graph has {} inputs, {} supplied", declared.len(), inputs.len()),
        ));
    }
    let mut vals: HashMap<String, IntTensor> = HashMap::with_capacity(lg.nodes.len());
    let mut next_input = inputs.iter();
    for n in &lg.nodes {
        let id = n.id.as_str();
        let arg = |k: usize| &vals[&n.inputs[k]];
        let v = match &n.op {
            IntOp::Input { bits, signed } => {
                let x = next_input.next().unwrap();
                if (x.f, x.bits, x.signed) != (n.f, *bits, *signed) {
                    return Err(RuntimeError::invalid(
                        id,
                        format!(
                            "input has f={} b={} signed={}, graph expects f={} b={bits} signed={signed}",
                            x.f, x.bits, x.signed, n.f
                        ),
                    ));
                }
                x.data.clone()
            }
            IntOp::Const { .. } => lg.consts[id].clone(),
            IntOp::Conv2d { stride, pad } => kernels::conv2d(id, arg(0), arg(1), *stride, *pad)?,
            IntOp::DepthwiseConv2d { stride, pad } => kernels::depthwise_conv2d(id, arg(0), arg(1), *stride, *pad)?,
            IntOp::MatMul => kernels::matmul(id, arg(0), arg(1))?,
            IntOp::BiasAdd => kernels::bias_add(id, arg(0), arg(1))?,
            IntOp::Add => kernels::add(id, arg(0), arg(1))?,
            IntOp::Requant { shift, bits, signed } => requant(id, arg(0), *shift, *bits, *signed)?,
            IntOp::Relu => arg(0).map(|v| v.max(0)),
            IntOp::Clamp { lo, hi } => {
                let (lo, hi) = (*lo as i32, *hi as i32);
                arg(0).map(|v| v.clamp(lo, hi))
            }
            IntOp::Max => kernels::max(id, arg(0), arg(1))?,
            IntOp::Mul => kernels::scalar_mul(id, arg(0), arg(1))?,
            IntOp::Concat => {
                let xs: Vec<&IntTensor> = (0..n.inputs.len()).map(arg).collect();
                concat(&xs)?
            }
            IntOp::Flatten => {
                let x = arg(0);
                let rest: usize = x.shape()[1..].iter().product();
                x.reshape(&[x.shape()[0], rest])?
            }
        };
        vals.insert(n.id.clone(), v);
    }
    Ok(vals)
}

/// Runs the graph and returns its outputs with their fractional lengths.
pub fn execute_integer(lg: &LoweredGraph, inputs: &[FixedPointTensor]) -> Result<Vec<FixedPointTensor>> {
    let vals = execute_trace(lg, inputs)?;
    lg.outputs
        .iter()
        .map(|o| {
            let n = lg.node(o).unwrap();
            let (bits, signed) = n.op.bits();
            FixedPointTensor::new(vals[o].clone(), n.f, bits, signed)
        })
        .collect()
}
