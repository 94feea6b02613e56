//! Conversion of a quantized [`Model`] into an integer graph.
//!
//! Every value is tracked with its fractional length `f`. Products add the
//! `f` of their operands, quantize nodes become rounded shifts by
//! `f_in - f_out`, and operands of additions, maxima and concatenations are
//! brought to a common `f` by exact left shifts (a no-op when they already
//! share a quantizer group).

use std::collections::HashMap;

use tqt_core::quant::quantize_levels;
use tqt_core::IntTensor;
use tqt_graph::model::const_file;
use tqt_graph::{Model, Op};

use crate::error::{Result, RuntimeError};
use crate::fixed::ACC_BITS;
use crate::lowered::{IntNode, IntOp, LoweredGraph};

struct Lowerer<'a> {
    model: &'a Model,
    out: LoweredGraph,
    /// Graph node id to the lowered node holding its value, and that `f`.
    map: HashMap<String, (String, i32)>,
}

impl Lowerer<'_> {
    fn get(&self, user: &str, id: &str) -> Result<(String, i32)> {
        self.map
            .get(id)
            .cloned()
            .ok_or_else(|| RuntimeError::lowering(user, format!("operand '{id}' is not quantized")))
    }

    fn push(&mut self, id: &str, op: IntOp, inputs: Vec<String>, f: i32) {
        self.out.nodes.push(IntNode {
            id: id.to_string(),
            op,
            inputs,
            f,
        });
        self.map.insert(id.to_string(), (id.to_string(), f));
    }

    /// Operands of `user` at a common fractional length, the finest one
    /// among them unless `min_f` asks for more.
    fn aligned(&mut self, user: &str, inputs: &[String], min_f: i32) -> Result<(Vec<String>, i32)> {
        let ops: Vec<(String, i32)> = inputs.iter().map(|i| self.get(user, i)).collect::<Result<_>>()?;
        let f = ops.iter().map(|o| o.1).max().unwrap_or(min_f).max(min_f);
        let mut ids = Vec::with_capacity(ops.len());
        for (k, (lid, fi)) in ops.into_iter().enumerate() {
            if fi == f {
                ids.push(lid);
                continue;
            }
            let id = format!("{user}/align{k}");
            let op = IntOp::Requant {
                shift: fi - f,
                bits: ACC_BITS,
                signed: true,
            };
            self.out.nodes.push(IntNode {
                id: id.clone(),
                op,
                inputs: vec![lid],
                f,
            });
            ids.push(id);
        }
        Ok((ids, f))
    }
}

/// Lowers a quantized model with fixed thresholds to integer operations.
pub fn lower(model: &Model) -> Result<LoweredGraph> {
    let g = &model.graph;
    let consumers = g.consumers();
    let mut l = Lowerer {
        model,
        out: LoweredGraph::default(),
        map: HashMap::new(),
    };
    for id in g.topo_order()? {
        let node = g.node(&id).unwrap();
        let ins = &node.inputs;
        match &node.op {
            Op::Input => {
                let groups: Vec<&str> = consumers[&id]
                    .iter()
                    .map(|c| match &g.node(c).unwrap().op {
                        Op::Quantize { group, .. } => Ok(group.as_str()),
                        _ => Err(RuntimeError::lowering(c, format!("reads input '{id}' without a quantizer"))),
                    })
                    .collect::<Result<_>>()?;
                let Some(&group) = groups.first() else {
                    return Err(RuntimeError::lowering(&id, "input is never used"));
                };
                if groups.iter().any(|&gr| gr != group) {
                    return Err(RuntimeError::lowering(&id, "input feeds several quantizer groups"));
                }
                let q = l.model.quantizer(group)?;
                l.push(&id, IntOp::Input { bits: q.bits, signed: q.signed }, vec![], q.frac_len());
            }
            Op::Const { .. } => {}
            Op::Quantize { group, bits, signed } => {
                let q = l.model.quantizer(group)?;
                let fq = q.frac_len();
                let src = g.node(&ins[0]).unwrap();
                match src.op {
                    Op::Const { .. } => {
                        let levels = quantize_levels(l.model.const_tensor(&src.id)?, &q);
                        let shape = l.model.const_tensor(&src.id)?.shape().to_vec();
                        let ints = IntTensor::new(shape, levels.into_iter().map(|v| v as i32).collect())?;
                        l.out.consts.insert(id.clone(), ints);
                        let op = IntOp::Const {
                            file: const_file(&id),
                            bits: *bits,
                            signed: *signed,
                        };
                        l.push(&id, op, vec![], fq);
                    }
                    Op::Input if l.get(&id, &src.id)?.1 == fq => {
                        let v = l.get(&id, &src.id)?;
                        l.map.insert(id.clone(), v);
                    }
                    _ => {
                        let (src, fin) = l.get(&id, &src.id)?;
                        let op = IntOp::Requant {
                            shift: fin - fq,
                            bits: *bits,
                            signed: *signed,
                        };
                        l.push(&id, op, vec![src], fq);
                    }
                }
            }
            Op::Conv2d { .. } | Op::DepthwiseConv2d { .. } | Op::MatMul | Op::Mul => {
                let (x, fx) = l.get(&id, &ins[0])?;
                let (w, fw) = l.get(&id, &ins[1])?;
                let op = match node.op {
                    Op::Conv2d { stride, pad } => IntOp::Conv2d { stride, pad },
                    Op::DepthwiseConv2d { stride, pad, .. } => IntOp::DepthwiseConv2d { stride, pad },
                    Op::MatMul => IntOp::MatMul,
                    _ => IntOp::Mul,
                };
                l.push(&id, op, vec![x, w], fx + fw);
            }
            Op::BiasAdd | Op::EltwiseAdd | Op::Maximum | Op::Concat => {
                let (inputs, f) = l.aligned(&id, ins, i32::MIN)?;
                let op = match node.op {
                    Op::BiasAdd => IntOp::BiasAdd,
                    Op::EltwiseAdd => IntOp::Add,
                    Op::Maximum => IntOp::Max,
                    _ => IntOp::Concat,
                };
                l.push(&id, op, inputs, f);
            }
            Op::Relu | Op::Flatten => {
                let (x, f) = l.get(&id, &ins[0])?;
                let op = if node.op == Op::Relu { IntOp::Relu } else { IntOp::Flatten };
                l.push(&id, op, vec![x], f);
            }
            Op::Relu6 => {
                // The cap 6 · 2^f is an integer once f >= -1.
                let (inputs, f) = l.aligned(&id, ins, -1)?;
                let hi = if f >= 0 { 6i64 << f } else { 3 };
                l.push(&id, IntOp::Clamp { lo: 0, hi }, inputs, f);
            }
            Op::Identity => {
                let v = l.get(&id, &ins[0])?;
                l.map.insert(id.clone(), v);
            }
            Op::LeakyRelu { .. } | Op::AvgPool { .. } | Op::BatchNorm { .. } => {
                return Err(RuntimeError::lowering(
                    &id,
                    format!("{} has no integer form; quantize the graph first", node.op.name()),
                ));
            }
        }
    }
    l.out.outputs = g
        .outputs
        .iter()
        .map(|o| l.get("<outputs>", o).map(|v| v.0))
        .collect::<Result<_>>()?;
    l.out.validate()?;
    Ok(l.out)
}
