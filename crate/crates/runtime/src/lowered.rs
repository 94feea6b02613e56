//! The integer graph and its on-disk bundle.
//!
//! Text form, one node per line, every node annotated with the fractional
//! length `f` of its value:
//!
//! ```text
//! # tqt-int 1
//! # outputs: r/q
//! x = input() {bits=8, f=5, signed=true}
//! c/w/q = const() {bits=8, f=7, file=c.w.q.tqt, signed=true}
//! c = conv2d(x, c/w/q) {f=12, pad=same, stride=1}
//! c/acc = requant(c) {bits=16, f=10, shift=2, signed=true}
//! r = clamp(c/acc) {f=10, hi=6144, lo=0}
//! r/q = requant(r) {bits=8, f=5, shift=5, signed=false}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use tqt_core::io::{read_tensor, write_tensor};
use tqt_core::{IntTensor, Padding};

use crate::error::{Result, RuntimeError};
use crate::fixed::ACC_BITS;

pub const HEADER: &str = "# tqt-int 1";
pub const GRAPH_FILE: &str = "lowered.ir";
pub const SCALES_FILE: &str = "scales.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IntOp {
    Input { bits: u32, signed: bool },
    Const { file: String, bits: u32, signed: bool },
    Conv2d { stride: usize, pad: Padding },
    DepthwiseConv2d { stride: usize, pad: Padding },
    MatMul,
    /// Per-channel add of a vector; operands share `f`.
    BiasAdd,
    /// Elementwise add; operands share `f`.
    Add,
    /// Rounded shift by `shift` bits then saturation to `bits`.
    Requant { shift: i32, bits: u32, signed: bool },
    Relu,
    Clamp { lo: i64, hi: i64 },
    Max,
    /// One-element tensor times a tensor.
    Mul,
    Concat,
    Flatten,
}

impl IntOp {
    pub fn name(&self) -> &'static str {
        match self {
            IntOp::Input { .. } => "input",
            IntOp::Const { .. } => "const",
            IntOp::Conv2d { .. } => "conv2d",
            IntOp::DepthwiseConv2d { .. } => "depthwise_conv2d",
            IntOp::MatMul => "matmul",
            IntOp::BiasAdd => "bias_add",
            IntOp::Add => "add",
            IntOp::Requant { .. } => "requant",
            IntOp::Relu => "relu",
            IntOp::Clamp { .. } => "clamp",
            IntOp::Max => "max",
            IntOp::Mul => "mul",
            IntOp::Concat => "concat",
            IntOp::Flatten => "flatten",
        }
    }

    fn arity(&self) -> (usize, usize) {
        match self {
            IntOp::Input { .. } | IntOp::Const { .. } => (0, 0),
            IntOp::Requant { .. } | IntOp::Relu | IntOp::Clamp { .. } | IntOp::Flatten => (1, 1),
            IntOp::Concat => (1, usize::MAX),
            _ => (2, 2),
        }
    }

    /// Declared width of the node's value.
    pub fn bits(&self) -> (u32, bool) {
        match *self {
            IntOp::Input { bits, signed } | IntOp::Const { bits, signed, .. } | IntOp::Requant { bits, signed, .. } => {
                (bits, signed)
            }
            _ => (ACC_BITS, true),
        }
    }

    fn attrs(&self) -> Vec<(&'static str, String)> {
        let b = |bits: u32, signed: bool| vec![("bits", bits.to_string()), ("signed", signed.to_string())];
        match self {
            IntOp::Input { bits, signed } => b(*bits, *signed),
            IntOp::Const { file, bits, signed } => {
                let mut a = b(*bits, *signed);
                a.push(("file", file.clone()));
                a
            }
            IntOp::Conv2d { stride, pad } | IntOp::DepthwiseConv2d { stride, pad } => {
                vec![("pad", pad.to_string()), ("stride", stride.to_string())]
            }
            IntOp::Requant { shift, bits, signed } => {
                let mut a = b(*bits, *signed);
                a.push(("shift", shift.to_string()));
                a
            }
            IntOp::Clamp { lo, hi } => vec![("hi", hi.to_string()), ("lo", lo.to_string())],
            _ => Vec::new(),
        }
    }

    fn from_parts(name: &str, a: &BTreeMap<String, String>) -> std::result::Result<IntOp, String> {
        fn get<T: FromStr>(a: &BTreeMap<String, String>, k: &str) -> std::result::Result<T, String> {
            let v = a.get(k).ok_or_else(|| format!("missing attribute '{k}'"))?;
            v.parse().map_err(|_| format!("bad value '{v}' for attribute '{k}'"))
        }
        let op = match name {
            "input" => IntOp::Input {
                bits: get(a, "bits")?,
                signed: get(a, "signed")?,
            },
            "const" => IntOp::Const {
                file: get(a, "file")?,
                bits: get(a, "bits")?,
                signed: get(a, "signed")?,
            },
            "conv2d" => IntOp::Conv2d {
                stride: get(a, "stride")?,
                pad: get(a, "pad")?,
            },
            "depthwise_conv2d" => IntOp::DepthwiseConv2d {
                stride: get(a, "stride")?,
                pad: get(a, "pad")?,
            },
            "matmul" => IntOp::MatMul,
            "bias_add" => IntOp::BiasAdd,
            "add" => IntOp::Add,
            "requant" => IntOp::Requant {
                shift: get(a, "shift")?,
                bits: get(a, "bits")?,
                signed: get(a, "signed")?,
            },
            "relu" => IntOp::Relu,
            "clamp" => IntOp::Clamp {
                lo: get(a, "lo")?,
                hi: get(a, "hi")?,
            },
            "max" => IntOp::Max,
            "mul" => IntOp::Mul,
            "concat" => IntOp::Concat,
            "flatten" => IntOp::Flatten,
            other => return Err(format!("unknown op '{other}'")),
        };
        let known: BTreeSet<&str> = op.attrs().iter().map(|(k, _)| *k).chain(["f"]).collect();
        if let Some(k) = a.keys().find(|k| !known.contains(k.as_str())) {
            return Err(format!("unknown attribute '{k}' for {name}"));
        }
        Ok(op)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntNode {
    pub id: String,
    pub op: IntOp,
    pub inputs: Vec<String>,
    /// Fractional length of the node's value.
    pub f: i32,
}

/// Integer-only graph. Nodes are stored in evaluation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoweredGraph {
    pub nodes: Vec<IntNode>,
    pub outputs: Vec<String>,
    pub consts: BTreeMap<String, IntTensor>,
}

impl LoweredGraph {
    pub fn node(&self, id: &str) -> Option<&IntNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut IntNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn inputs(&self) -> Vec<&IntNode> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, IntOp::Input { .. }))
            .collect()
    }

    /// Ids unique, inputs defined before use, arity, const payloads present.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            let (lo, hi) = n.op.arity();
            if n.inputs.len() < lo || n.inputs.len() > hi {
                return Err(RuntimeError::invalid(&n.id, format!("{} has {} inputs", n.op.name(), n.inputs.len())));
            }
            if let Some(i) = n.inputs.iter().find(|i| !seen.contains(i.as_str())) {
                return Err(RuntimeError::invalid(&n.id, format!("input '{i}' not defined earlier")));
            }
            if matches!(n.op, IntOp::Const { .. }) && !self.consts.contains_key(&n.id) {
                return Err(RuntimeError::invalid(&n.id, "const without payload"));
            }
            if !seen.insert(n.id.as_str()) {
                return Err(RuntimeError::invalid(&n.id, "duplicate id"));
            }
        }
        if let Some(o) = self.outputs.iter().find(|o| !seen.contains(o.as_str())) {
            return Err(RuntimeError::invalid(o.as_str(), "undefined output"));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = format!("{HEADER}\n# outputs: {}\n", self.outputs.join(", "));
        for n in &self.nodes {
            let mut attrs = n.op.attrs();
            attrs.push(("f", n.f.to_string()));
            attrs.sort();
            let body: Vec<String> = attrs.iter().map(|(k, v)| format!("{k}={v}")).collect();
            writeln!(s, "{} = {}({}) {{{}}}", n.id, n.op.name(), n.inputs.join(", "), body.join(", ")).unwrap();
        }
        s
    }

    /// Parses the node structure; const payloads are attached separately.
    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| RuntimeError::Parse { line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(err(1, format!("expected header '{HEADER}'"))),
        }
        let mut g = LoweredGraph::default();
        for (i, raw) in lines {
            let ln = i + 1;
            let line = raw.trim();
            if let Some(rest) = line.strip_prefix("# outputs:") {
                g.outputs = rest.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, rhs) = line.split_once(" = ").ok_or_else(|| err(ln, "expected 'id = op(...)'".into()))?;
            let open = rhs.find('(').ok_or_else(|| err(ln, "missing '('".into()))?;
            let close = rhs.find(')').ok_or_else(|| err(ln, "missing ')'".into()))?;
            let name = &rhs[..open];
            let inputs: Vec<String> = rhs[open + 1..close]
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            let tail = rhs[close + 1..].trim();
            let body = tail
                .strip_prefix('{')
                .and_then(|t| t.strip_suffix('}'))
                .ok_or_else(|| err(ln, "missing attribute block".into()))?;
            let mut attrs = BTreeMap::new();
            for kv in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let (k, v) = kv.split_once('=').ok_or_else(|| err(ln, format!("malformed attribute '{kv}'")))?;
                attrs.insert(k.trim().to_string(), v.trim().to_string());
            }
            let f: i32 = attrs
                .get("f")
                .ok_or_else(|| err(ln, "missing attribute 'f'".into()))?
                .parse()
                .map_err(|_| err(ln, "bad value for 'f'".into()))?;
            let op = IntOp::from_parts(name, &attrs).map_err(|m| err(ln, format!("node '{id}': {m}")))?;
            g.nodes.push(IntNode {
                id: id.trim().to_string(),
                op,
                inputs,
                f,
            });
        }
        Ok(g)
    }

    /// Writes the deployment bundle: the text graph, one `i32` tensor file
    /// per constant and a `tensor,f,b,signed` manifest for every node.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(GRAPH_FILE), self.serialize())?;
        for n in &self.nodes {
            if let IntOp::Const { file, .. } = &n.op {
                write_tensor(dir.join(file), &self.consts[&n.id])?;
            }
        }
        let mut w = csv::Writer::from_path(dir.join(SCALES_FILE)).map_err(csv_err)?;
        w.write_record(["tensor", "f", "b", "signed"]).map_err(csv_err)?;
        for n in &self.nodes {
            let (bits, signed) = n.op.bits();
            w.write_record([n.id.clone(), n.f.to_string(), bits.to_string(), signed.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut g = Self::parse(&fs::read_to_string(dir.join(GRAPH_FILE))?)?;
        for n in &g.nodes {
            if let IntOp::Const { file, .. } = &n.op {
                g.consts.insert(n.id.clone(), read_tensor(dir.join(file))?);
            }
        }
        g.validate()?;
        Ok(g)
    }
}

fn csv_err(e: csv::Error) -> RuntimeError {
    RuntimeError::Core(tqt_core::Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tqt_graph::model::const_file;

    fn sample() -> LoweredGraph {
        let mut g = LoweredGraph::default();
        let node = |id: &str, op, inputs: &[&str], f| IntNode {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            f,
        };
        g.nodes = vec![
            node("x", IntOp::Input { bits: 8, signed: true }, &[], 5),
            node(
                "w",
                IntOp::Const {
                    file: const_file("w"),
                    bits: 8,
                    signed: true,
                },
                &[],
                7,
            ),
            node("c", IntOp::Conv2d { stride: 1, pad: Padding::Same }, &["x", "w"], 12),
            node(
                "c/q",
                IntOp::Requant {
                    shift: 7,
                    bits: 8,
                    signed: false,
                },
                &["c"],
                5,
            ),
            node("r", IntOp::Clamp { lo: 0, hi: 192 }, &["c/q"], 5),
        ];
        g.outputs = vec!["r".into()];
        g.consts.insert("w".into(), IntTensor::new(vec![1, 1, 1, 1], vec![64]).unwrap());
        g
    }

    #[test]
    fn text_form_round_trips() {
        let g = sample();
        let text = g.serialize();
        assert!(text.contains("c/q = requant(c) {bits=8, f=5, shift=7, signed=false}"));
        let mut back = LoweredGraph::parse(&text).unwrap();
        back.consts = g.consts.clone();
        assert_eq!(back, g);
    }

    #[test]
    fn bundle_round_trips_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let g = sample();
        g.save(dir.path()).unwrap();
        assert_eq!(LoweredGraph::load(dir.path()).unwrap(), g);
        let manifest = fs::read_to_string(dir.path().join(SCALES_FILE)).unwrap();
        assert!(manifest.starts_with("tensor,f,b,signed\n"));
        assert!(manifest.contains("c,12,32,true"));
        assert!(manifest.contains("c/q,5,8,false"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = format!("{HEADER}\nx = input() {{bits=8, f=1, signed=true, extra=1}}\n");
        match LoweredGraph::parse(&bad) {
            Err(RuntimeError::Parse { line: 2, msg }) => assert!(msg.contains("extra")),
            other => panic!("{other:?}"),
        }
        let mut g = sample();
        g.nodes.swap(2, 3);
        assert!(g.validate().is_err());
    }
}
