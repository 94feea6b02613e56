//! Graph nodes and the line-oriented text form.
//!
//! ```text
//! # tqt-ir 1
//! # outputs: y
//! x = input()
//! w = const() {file=w.tqt}
//! c = conv2d(x, w) {pad=same, stride=1}
//! y = relu(c)
//! ```
//!
//! Attributes are written in key order, so serialization is canonical and
//! `parse(serialize(g)) == g`.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt::{self, Write as _};

use tqt_core::Padding;

use crate::error::{GraphError, Result};

pub const HEADER: &str = "# tqt-ir 1";

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    /// Tensor payload stored alongside the graph. `fixed` constants are never
    /// trained (pooling reciprocals, activation slopes, batch-norm moments).
    Const { file: String, fixed: bool },
    Conv2d { stride: usize, pad: Padding },
    /// `pool` marks a depthwise conv produced from an average pool.
    DepthwiseConv2d { stride: usize, pad: Padding, pool: bool },
    MatMul,
    BiasAdd,
    /// Inputs: x, gamma, beta, moving mean, moving variance.
    BatchNorm { eps: f64 },
    Relu,
    Relu6,
    LeakyRelu { alpha: f64 },
    AvgPool { k: usize, stride: usize },
    EltwiseAdd,
    Concat,
    Maximum,
    /// One-element tensor times a tensor.
    Mul,
    /// `[N, ...] -> [N, prod(...)]`.
    Flatten,
    Identity,
    Quantize { bits: u32, signed: bool, group: String },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const { .. } => "const",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::MatMul => "matmul",
            Op::BiasAdd => "bias_add",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu => "relu",
            Op::Relu6 => "relu6",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::AvgPool { .. } => "avg_pool",
            Op::EltwiseAdd => "eltwise_add",
            Op::Concat => "concat",
            Op::Maximum => "maximum",
            Op::Mul => "mul",
            Op::Flatten => "flatten",
            Op::Identity => "identity",
            Op::Quantize { .. } => "quantize",
        }
    }

    /// Allowed input counts as `(min, max)`.
    pub fn arity(&self) -> (usize, usize) {
        match self {
            Op::Input | Op::Const { .. } => (0, 0),
            Op::Relu
            | Op::Relu6
            | Op::LeakyRelu { .. }
            | Op::AvgPool { .. }
            | Op::Flatten
            | Op::Identity
            | Op::Quantize { .. } => (1, 1),
            Op::Conv2d { .. }
            | Op::DepthwiseConv2d { .. }
            | Op::MatMul
            | Op::BiasAdd
            | Op::EltwiseAdd
            | Op::Maximum
            | Op::Mul => (2, 2),
            Op::BatchNorm { .. } => (5, 5),
            Op::Concat => (1, usize::MAX),
        }
    }

    pub fn is_compute(&self) -> bool {
        matches!(self, Op::Conv2d { .. } | Op::DepthwiseConv2d { .. } | Op::MatMul)
    }

    fn attrs(&self) -> Vec<(&'static str, String)> {
        match self {
            Op::Const { file, fixed } => {
                let mut a = vec![("file", file.clone())];
                if *fixed {
                    a.push(("fixed", "true".into()));
                }
                a
            }
            Op::Conv2d { stride, pad } => vec![("pad", pad.to_string()), ("stride", stride.to_string())],
            Op::DepthwiseConv2d { stride, pad, pool } => {
                let mut a = vec![("pad", pad.to_string())];
                if *pool {
                    a.push(("pool", "true".into()));
                }
                a.push(("stride", stride.to_string()));
                a
            }
            Op::BatchNorm { eps } => vec![("eps", eps.to_string())],
            Op::LeakyRelu { alpha } => vec![("alpha", alpha.to_string())],
            Op::AvgPool { k, stride } => vec![("k", k.to_string()), ("stride", stride.to_string())],
            Op::Quantize { bits, signed, group } => vec![
                ("bits", bits.to_string()),
                ("group", group.clone()),
                ("signed", signed.to_string()),
            ],
            _ => Vec::new(),
        }
    }

    fn from_parts(name: &str, attrs: &BTreeMap<String, String>) -> std::result::Result<Op, String> {
        fn get<T: std::str::FromStr>(a: &BTreeMap<String, String>, k: &str) -> std::result::Result<T, String> {
            let v = a.get(k).ok_or_else(|| format!("missing attribute '{k}'"))?;
            v.parse().map_err(|_| format!("bad value '{v}' for attribute '{k}'"))
        }
        fn flag(a: &BTreeMap<String, String>, k: &str) -> std::result::Result<bool, String> {
            match a.get(k).map(String::as_str) {
                None | Some("false") => Ok(false),
                Some("true") => Ok(true),
                Some(v) => Err(format!("bad boolean '{v}' for attribute '{k}'")),
            }
        }
        let op = match name {
            "input" => Op::Input,
            "const" => Op::Const {
                file: get(attrs, "file")?,
                fixed: flag(attrs, "fixed")?,
            },
            "conv2d" => Op::Conv2d {
                stride: get(attrs, "stride")?,
                pad: get(attrs, "pad")?,
            },
            "depthwise_conv2d" => Op::DepthwiseConv2d {
                stride: get(attrs, "stride")?,
                pad: get(attrs, "pad")?,
                pool: flag(attrs, "pool")?,
            },
            "matmul" => Op::MatMul,
            "bias_add" => Op::BiasAdd,
            "batch_norm" => Op::BatchNorm { eps: get(attrs, "eps")? },
            "relu" => Op::Relu,
            "relu6" => Op::Relu6,
            "leaky_relu" => Op::LeakyRelu { alpha: get(attrs, "alpha")? },
            "avg_pool" => Op::AvgPool {
                k: get(attrs, "k")?,
                stride: get(attrs, "stride")?,
            },
            "eltwise_add" => Op::EltwiseAdd,
            "concat" => Op::Concat,
            "maximum" => Op::Maximum,
            "mul" => Op::Mul,
            "flatten" => Op::Flatten,
            "identity" => Op::Identity,
            "quantize" => Op::Quantize {
                bits: get(attrs, "bits")?,
                signed: get(attrs, "signed")?,
                group: get(attrs, "group")?,
            },
            other => return Err(format!("unknown op kind '{other}'")),
        };
        let mut known: BTreeSet<&str> = op.attrs().iter().map(|(k, _)| *k).collect();
        match op {
            Op::Const { .. } => known.insert("fixed"),
            Op::DepthwiseConv2d { .. } => known.insert("pool"),
            _ => false,
        };
        if let Some(k) = attrs.keys().find(|k| !known.contains(k.as_str())) {
            return Err(format!("unexpected attribute '{k}' for {name}"));
        }
        Ok(op)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

impl Node {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        Node {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}({})", self.id, self.op.name(), self.inputs.join(", "))?;
        let attrs = self.op.attrs();
        if !attrs.is_empty() {
            let body: Vec<String> = attrs.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, " {{{}}}", body.join(", "))?;
        }
        Ok(())
    }
}

/// Dataflow graph. Node order is preserved as given; use [`Graph::topo_order`]
/// for evaluation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub outputs: Vec<String>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '/' | '.' | '-' | ':'))
}

impl Graph {
    pub fn new(nodes: Vec<Node>, outputs: Vec<String>) -> Result<Self> {
        let g = Graph { nodes, outputs };
        g.validate()?;
        Ok(g)
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }

    /// Input node ids in stored order.
    pub fn inputs(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.op == Op::Input)
            .map(|n| n.id.clone())
            .collect()
    }

    /// Consumer ids of every node, in stored order.
    pub fn consumers(&self) -> HashMap<String, Vec<String>> {
        let mut out: HashMap<String, Vec<String>> =
            self.nodes.iter().map(|n| (n.id.clone(), Vec::new())).collect();
        for n in &self.nodes {
            for i in &n.inputs {
                if let Some(v) = out.get_mut(i) {
                    if !v.contains(&n.id) {
                        v.push(n.id.clone());
                    }
                }
            }
        }
        out
    }

    /// Structural checks: unique well-formed ids, arity, no dangling
    /// references, existing outputs, acyclicity.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !valid_id(&n.id) {
                return Err(GraphError::invalid(&n.id, "malformed node id"));
            }
            if !seen.insert(n.id.as_str()) {
                return Err(GraphError::invalid(&n.id, "duplicate node id"));
            }
        }
        for n in &self.nodes {
            let (lo, hi) = n.op.arity();
            if n.inputs.len() < lo || n.inputs.len() > hi {
                return Err(GraphError::invalid(
                    &n.id,
                    format!("{} takes {lo}..{hi} inputs, got {}", n.op.name(), n.inputs.len()),
                ));
            }
            if let Some(missing) = n.inputs.iter().find(|i| !seen.contains(i.as_str())) {
                return Err(GraphError::invalid(&n.id, format!("dangling input '{missing}'")));
            }
        }
        if let Some(o) = self.outputs.iter().find(|o| !seen.contains(o.as_str())) {
            return Err(GraphError::invalid(o.as_str(), "declared output does not exist"));
        }
        self.topo_order()?;
        Ok(())
    }

    /// Kahn's algorithm with ties broken by id, so the order is a function of
    /// the graph alone.
    pub fn topo_order(&self) -> Result<Vec<String>> {
        let idx = self.index();
        let mut indeg: Vec<usize> = vec![0; self.nodes.len()];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                let &j = idx
                    .get(inp.as_str())
                    .ok_or_else(|| GraphError::invalid(&n.id, format!("dangling input '{inp}'")))?;
                indeg[i] += 1;
                users[j].push(i);
            }
        }
        let mut ready: BinaryHeap<Reverse<(&str, usize)>> = indeg
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| Reverse((self.nodes[i].id.as_str(), i)))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse((id, i))) = ready.pop() {
            order.push(id.to_string());
            for &u in &users[i] {
                indeg[u] -= 1;
                if indeg[u] == 0 {
                    ready.push(Reverse((self.nodes[u].id.as_str(), u)));
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = indeg.iter().position(|&d| d > 0).unwrap();
            return Err(GraphError::invalid(&self.nodes[stuck].id, "cycle detected"));
        }
        Ok(order)
    }

    /// Reorders the stored nodes into [`Graph::topo_order`].
    pub fn sorted(mut self) -> Result<Self> {
        let order = self.topo_order()?;
        let mut by_id: HashMap<String, Node> = self.nodes.drain(..).map(|n| (n.id.clone(), n)).collect();
        self.nodes = order.into_iter().map(|id| by_id.remove(&id).unwrap()).collect();
        Ok(self)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        s.push_str(HEADER);
        s.push('\n');
        writeln!(s, "# outputs: {}", self.outputs.join(", ")).unwrap();
        for n in &self.nodes {
            writeln!(s, "{n}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut outputs = Vec::new();
        let mut saw_header = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if line == HEADER {
                    saw_header = true;
                } else if let Some(list) = rest.strip_prefix("outputs:") {
                    outputs = list
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect();
                }
                continue;
            }
            nodes.push(parse_node(line, lineno)?);
        }
        if !saw_header && !nodes.is_empty() {
            return Err(GraphError::Parse {
                line: 1,
                node: String::new(),
                msg: format!("missing '{HEADER}' header"),
            });
        }
        let g = Graph { nodes, outputs };
        g.validate().map_err(|e| match e {
            GraphError::Invalid { node, msg } => {
                let line = text
                    .lines()
                    .position(|l| l.trim_start().starts_with(&format!("{node} =")))
                    .map_or(0, |p| p + 1);
                GraphError::Parse { line, node, msg }
            }
            other => other,
        })?;
        Ok(g)
    }
}

fn parse_node(line: &str, lineno: usize) -> Result<Node> {
    let err = |node: &str, msg: String| GraphError::Parse {
        line: lineno,
        node: node.to_string(),
        msg,
    };
    let (id, rest) = line
        .split_once('=')
        .ok_or_else(|| err("", "expected 'id = op(...)'".into()))?;
    let id = id.trim();
    if !valid_id(id) {
        return Err(err(id, "malformed node id".into()));
    }
    let rest = rest.trim();
    let open = rest.find('(').ok_or_else(|| err(id, "missing '(' in input list".into()))?;
    let close = rest.find(')').ok_or_else(|| err(id, "missing ')' in input list".into()))?;
    if close < open {
        return Err(err(id, "malformed input list".into()));
    }
    let op_name = rest[..open].trim();
    let list = rest[open + 1..close].trim();
    let inputs: Vec<String> = if list.is_empty() {
        Vec::new()
    } else {
        list.split(',').map(|s| s.trim().to_string()).collect()
    };
    if inputs.iter().any(|i| !valid_id(i)) {
        return Err(err(id, format!("malformed input list '({list})'")));
    }
    let tail = rest[close + 1..].trim();
    let mut attrs = BTreeMap::new();
    if !tail.is_empty() {
        let body = tail
            .strip_prefix('{')
            .and_then(|t| t.strip_suffix('}'))
            .ok_or_else(|| err(id, format!("malformed attributes '{tail}'")))?;
        for kv in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| err(id, format!("malformed attribute '{kv}'")))?;
            attrs.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let op = Op::from_parts(op_name, &attrs).map_err(|m| err(id, m))?;
    Ok(Node {
        id: id.to_string(),
        op,
        inputs,
    })
}

/// Appends nodes with fresh ids derived from a base name.
pub(crate) fn fresh_id(taken: &BTreeSet<String>, base: &str) -> String {
    if !taken.contains(base) {
        return base.to_string();
    }
    (1..)
        .map(|k| format!("{base}.{k}"))
        .find(|c| !taken.contains(c))
        .unwrap()
}
