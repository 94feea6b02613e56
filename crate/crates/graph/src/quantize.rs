//! Insertion of quantize nodes into an optimized float graph.
//!
//! Every quantize node carries a group name; nodes in one group share a
//! single threshold. Ids of generated nodes derive from the node they
//! serve (`conv/w/q`, `conv/acc`, `relu/q`, ...), and a rule whose nodes
//! already exist is skipped, which makes the pass idempotent.

use std::str::FromStr;

use tqt_core::Tensor64;

use crate::error::{GraphError, Result};
use crate::ir::{Node, Op};
use crate::model::{const_file, Model};

/// Accumulators, biases and the internals of leaky ReLU use this width.
pub const WIDE_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrecisionConfig {
    pub bits_w: u32,
    pub bits_a: u32,
}

impl PrecisionConfig {
    pub const INT8: Self = PrecisionConfig { bits_w: 8, bits_a: 8 };
    /// 4-bit weights in every layer, first and last included; 8-bit
    /// activations.
    pub const INT4: Self = PrecisionConfig { bits_w: 4, bits_a: 8 };
}

impl FromStr for PrecisionConfig {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "int8" => Ok(Self::INT8),
            "int4" => Ok(Self::INT4),
            other => Err(GraphError::invalid("<precision>", format!("unknown precision '{other}'"))),
        }
    }
}

fn quant(bits: u32, signed: bool, group: &str) -> Op {
    Op::Quantize {
        bits,
        signed,
        group: group.to_string(),
    }
}

/// Whether the value of `id` is known to be non-negative, which lets its
/// quantizer drop the sign bit.
fn nonnegative(model: &Model, id: &str) -> bool {
    let Some(n) = model.graph.node(id) else { return false };
    match &n.op {
        Op::Relu | Op::Relu6 => true,
        Op::Quantize { signed, .. } => !signed,
        Op::Flatten | Op::Identity | Op::DepthwiseConv2d { pool: true, .. } => {
            nonnegative(model, &n.inputs[0])
        }
        Op::Concat | Op::Maximum => n.inputs.iter().all(|i| nonnegative(model, i)),
        _ => false,
    }
}

struct Inserter<'a> {
    model: &'a mut Model,
    cfg: PrecisionConfig,
}

impl Inserter<'_> {
    fn exists(&self, id: &str) -> bool {
        self.model.graph.contains(id)
    }

    /// `id = quantize(src)` in front of every reader of `src`.
    fn interpose(&mut self, src: &str, id: &str, bits: u32, signed: bool, group: &str) {
        self.model.graph.interpose(src, id, quant(bits, signed, group));
        self.model.thresholds.entry(group.to_string()).or_insert(0.0);
    }

    /// `id = quantize(input k of user)`, seen by `user` only.
    fn quantize_input(&mut self, user: &str, k: usize, id: &str, bits: u32, signed: bool, group: &str) {
        let n = self.model.graph.node_mut(user).unwrap();
        let src = std::mem::replace(&mut n.inputs[k], id.to_string());
        self.model.graph.nodes.push(Node::new(id, quant(bits, signed, group), &[&src]));
        self.model.thresholds.entry(group.to_string()).or_insert(0.0);
    }

    /// Output stage of a layer whose result is `src`: a following ReLU is
    /// kept in float and quantized unsigned after it, a following leaky ReLU
    /// quantizes its own input, anything else gets a signed quantizer.
    fn output_stage(&mut self, layer: &str, src: &str) {
        self.output_stage_signed(layer, src, true)
    }

    fn output_stage_signed(&mut self, layer: &str, src: &str, signed: bool) {
        let bits = self.cfg.bits_a;
        if let Some(c) = self.model.graph.sole_consumer(src) {
            match self.model.graph.node(&c).unwrap().op {
                Op::Relu | Op::Relu6 => {
                    let id = format!("{c}/q");
                    if !self.exists(&id) {
                        self.interpose(&c, &id, bits, false, &id);
                    }
                    return;
                }
                Op::LeakyRelu { .. } => return,
                _ => {}
            }
        }
        let id = format!("{layer}/q");
        self.interpose(src, &id, bits, signed, &id);
    }

    fn input(&mut self, id: &str) {
        let q = format!("{id}/q");
        if !self.exists(&q) {
            self.interpose(id, &q, self.cfg.bits_a, true, &q);
        }
    }

    fn compute(&mut self, node: &Node) {
        let w = &node.inputs[1];
        if matches!(self.model.graph.node(w).map(|n| &n.op), Some(Op::Quantize { .. })) {
            return;
        }
        let wq = format!("{w}/q");
        if let Op::DepthwiseConv2d { pool: true, .. } = node.op {
            // Pooling weights are fixed reciprocals; the sum needs no
            // accumulator stage.
            self.interpose(w, &wq, self.cfg.bits_a, true, &wq);
            let signed = !nonnegative(self.model, &node.inputs[0]);
            self.output_stage_signed(&node.id, &node.id, signed);
            return;
        }
        self.interpose(w, &wq, self.cfg.bits_w, true, &wq);
        let acc = format!("{}/acc", node.id);
        let biased = self
            .model
            .graph
            .sole_consumer(&node.id)
            .and_then(|c| self.model.graph.node(&c).cloned())
            .filter(|c| c.op == Op::BiasAdd && c.inputs[0] == node.id);
        let src = match biased {
            Some(ba) => {
                let b = &ba.inputs[1];
                self.interpose(b, &format!("{b}/q"), WIDE_BITS, true, &acc);
                ba.id
            }
            None => node.id.clone(),
        };
        self.interpose(&src, &acc, WIDE_BITS, true, &acc);
        self.output_stage(&node.id, &acc);
    }

    /// Shared-threshold quantizers on every input of `node`, named
    /// `node/in0`, `node/in1`, ... in group `node/in`.
    fn aligned_inputs(&mut self, node: &Node) -> bool {
        if self.exists(&format!("{}/in0", node.id)) {
            return false;
        }
        let signed = !node.inputs.iter().all(|i| nonnegative(self.model, i));
        let group = format!("{}/in", node.id);
        for k in 0..node.inputs.len() {
            let id = format!("{}/in{k}", node.id);
            self.quantize_input(&node.id, k, &id, self.cfg.bits_a, signed, &group);
        }
        true
    }

    /// `y = leaky(x)` becomes `y = maximum(x', q(alpha) · x')`, where `x'`
    /// and the product share a 16-bit threshold, followed by an output
    /// quantizer.
    fn leaky(&mut self, node: &Node, alpha: f64) {
        let id = &node.id;
        let xq = format!("{id}/x");
        if self.exists(&xq) {
            return;
        }
        let g = format!("{id}/g");
        self.quantize_input(id, 0, &xq, WIDE_BITS, true, &g);
        let a = format!("{id}/alpha");
        self.model.consts.insert(a.clone(), Tensor64::from_vec(vec![alpha]));
        self.model.graph.nodes.push(Node::new(
            a.clone(),
            Op::Const {
                file: const_file(&a),
                fixed: true,
            },
            &[],
        ));
        let aq = format!("{a}/q");
        self.interpose(&a, &aq, WIDE_BITS, true, &aq);
        let mul = format!("{id}/mul");
        self.model.graph.nodes.push(Node::new(mul.clone(), Op::Mul, &[&aq, &xq]));
        let mulq = format!("{mul}/q");
        self.interpose(&mul, &mulq, WIDE_BITS, true, &g);
        let n = self.model.graph.node_mut(id).unwrap();
        n.op = Op::Maximum;
        n.inputs = vec![xq, mulq];
        self.output_stage(id, id);
    }
}

/// Inserts quantizers for the given precision. New groups start at
/// `log2 t = 0`; calibration sets them afterwards.
pub fn insert_quant_layers(model: &mut Model, cfg: PrecisionConfig) -> Result<()> {
    for n in &model.graph.nodes {
        if matches!(n.op, Op::AvgPool { .. } | Op::BatchNorm { .. }) {
            return Err(GraphError::transform(
                &n.id,
                format!("{} must be removed by the optimizer before quantization", n.op.name()),
            ));
        }
    }
    let order = model.graph.topo_order()?;
    let mut ins = Inserter { model, cfg };
    for id in order {
        let node = ins.model.graph.node(&id).unwrap().clone();
        match node.op {
            Op::Input => ins.input(&id),
            ref op if op.is_compute() => ins.compute(&node),
            Op::EltwiseAdd => {
                if ins.aligned_inputs(&node) {
                    ins.output_stage(&id, &id);
                }
            }
            Op::Concat => {
                ins.aligned_inputs(&node);
            }
            Op::LeakyRelu { alpha } => ins.leaky(&node, alpha),
            _ => {}
        }
    }
    model.graph = std::mem::take(&mut model.graph).sorted()?;
    model.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::ModelBuilder;
    use tqt_core::Padding;

    fn q_of(m: &Model, id: &str) -> (u32, bool, String) {
        match &m.graph.node(id).unwrap().op {
            Op::Quantize { bits, signed, group } => (*bits, *signed, group.clone()),
            other => panic!("{id} is {}", other.name()),
        }
    }

    fn conv_bias_relu() -> Model {
        let mut b = ModelBuilder::new();
        b.input("x");
        b.conv2d("c", "x", Tensor64::ones(&[1, 1, 1, 2]), 1, Padding::Same);
        b.bias_add("cb", "c", Tensor64::zeros(&[2]));
        b.op("r", Op::Relu6, &["cb"]);
        b.output("r");
        b.build().unwrap()
    }

    #[test]
    fn compute_layer_stages() {
        let mut m = conv_bias_relu();
        insert_quant_layers(&mut m, PrecisionConfig::INT4).unwrap();
        assert_eq!(q_of(&m, "x/q"), (8, true, "x/q".into()));
        assert_eq!(q_of(&m, "c/w/q"), (4, true, "c/w/q".into()));
        assert_eq!(q_of(&m, "cb/b/q"), (16, true, "c/acc".into()));
        assert_eq!(q_of(&m, "c/acc"), (16, true, "c/acc".into()));
        assert_eq!(q_of(&m, "r/q"), (8, false, "r/q".into()));
        assert_eq!(m.graph.node("r").unwrap().inputs, vec!["c/acc"]);
        assert_eq!(m.graph.outputs, vec!["r/q"]);
        assert_eq!(m.thresholds.len(), 4);
    }

    #[test]
    fn second_application_changes_nothing() {
        let mut m = conv_bias_relu();
        insert_quant_layers(&mut m, PrecisionConfig::INT8).unwrap();
        let once = m.clone();
        insert_quant_layers(&mut m, PrecisionConfig::INT8).unwrap();
        assert_eq!(m, once);
    }

    #[test]
    fn unsigned_inputs_give_unsigned_shared_group() {
        let mut b = ModelBuilder::new();
        b.input("x");
        b.op("r1", Op::Relu, &["x"]);
        b.op("r2", Op::Relu6, &["x"]);
        b.op("k", Op::Concat, &["r1", "r2"]);
        b.op("a", Op::EltwiseAdd, &["r1", "x"]);
        b.output("k");
        b.output("a");
        let mut m = b.build().unwrap();
        insert_quant_layers(&mut m, PrecisionConfig::INT8).unwrap();
        assert_eq!(q_of(&m, "k/in0"), (8, false, "k/in".into()));
        assert_eq!(q_of(&m, "k/in1"), (8, false, "k/in".into()));
        assert_eq!(q_of(&m, "a/in0"), (8, true, "a/in".into()));
        assert_eq!(q_of(&m, "a/q"), (8, true, "a/q".into()));
        assert_eq!(m.graph.outputs, vec!["k", "a/q"]);
    }

    #[test]
    fn leftover_batch_norm_is_an_error() {
        let mut b = ModelBuilder::new();
        b.input("x");
        let one = Tensor64::ones(&[1]);
        b.batch_norm("bn", "x", one.clone(), one.clone(), one.clone(), one, 1e-5);
        b.output("bn");
        let mut m = b.build().unwrap();
        assert!(matches!(
            insert_quant_layers(&mut m, PrecisionConfig::INT8),
            Err(GraphError::Transform { .. })
        ));
    }
}
