//! Programmatic construction of models.

use std::collections::BTreeMap;

use tqt_core::{Padding, Tensor64};

use crate::error::Result;
use crate::ir::{Graph, Node, Op};
use crate::model::{const_file, Model};

#[derive(Debug, Default)]
pub struct ModelBuilder {
    nodes: Vec<Node>,
    consts: BTreeMap<String, Tensor64>,
    outputs: Vec<String>,
}

impl ModelBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn op(&mut self, id: &str, op: Op, inputs: &[&str]) -> String {
        self.nodes.push(Node::new(id, op, inputs));
        id.to_string()
    }

    pub fn input(&mut self, id: &str) -> String {
        self.op(id, Op::Input, &[])
    }

    fn add_const(&mut self, id: &str, t: Tensor64, fixed: bool) -> String {
        self.consts.insert(id.to_string(), t);
        self.op(
            id,
            Op::Const {
                file: const_file(id),
                fixed,
            },
            &[],
        )
    }

    /// A trainable constant.
    pub fn constant(&mut self, id: &str, t: Tensor64) -> String {
        self.add_const(id, t, false)
    }

    /// A constant that training never updates.
    pub fn fixed(&mut self, id: &str, t: Tensor64) -> String {
        self.add_const(id, t, true)
    }

    pub fn conv2d(&mut self, id: &str, x: &str, w: Tensor64, stride: usize, pad: Padding) -> String {
        let w = self.constant(&format!("{id}/w"), w);
        self.op(id, Op::Conv2d { stride, pad }, &[x, &w])
    }

    pub fn depthwise(&mut self, id: &str, x: &str, w: Tensor64, stride: usize, pad: Padding) -> String {
        let w = self.constant(&format!("{id}/w"), w);
        self.op(
            id,
            Op::DepthwiseConv2d {
                stride,
                pad,
                pool: false,
            },
            &[x, &w],
        )
    }

    pub fn matmul(&mut self, id: &str, x: &str, w: Tensor64) -> String {
        let w = self.constant(&format!("{id}/w"), w);
        self.op(id, Op::MatMul, &[x, &w])
    }

    pub fn bias_add(&mut self, id: &str, x: &str, b: Tensor64) -> String {
        let b = self.constant(&format!("{id}/b"), b);
        self.op(id, Op::BiasAdd, &[x, &b])
    }

    /// Batch norm with trainable scale/shift and fixed moving moments.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        id: &str,
        x: &str,
        gamma: Tensor64,
        beta: Tensor64,
        mean: Tensor64,
        var: Tensor64,
        eps: f64,
    ) -> String {
        let g = self.constant(&format!("{id}/gamma"), gamma);
        let b = self.constant(&format!("{id}/beta"), beta);
        let m = self.fixed(&format!("{id}/mean"), mean);
        let v = self.fixed(&format!("{id}/var"), var);
        self.op(id, Op::BatchNorm { eps }, &[x, &g, &b, &m, &v])
    }

    pub fn output(&mut self, id: &str) {
        self.outputs.push(id.to_string());
    }

    pub fn build(self) -> Result<Model> {
        Model::new(Graph::new(self.nodes, self.outputs)?, self.consts)
    }
}
