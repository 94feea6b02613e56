//! A graph together with its constant payloads and quantizer thresholds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use tqt_core::io::{read_tensor, write_tensor};
use tqt_core::{QuantizerParams, Tensor64};

use crate::error::{GraphError, Result};
use crate::ir::{Graph, Op};

pub const GRAPH_FILE: &str = "graph.ir";
pub const THRESHOLDS_FILE: &str = "thresholds.csv";

/// Bit-width and signedness shared by every quantizer of a group, plus the
/// group's trained log-threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupInfo {
    pub bits: u32,
    pub signed: bool,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Model {
    pub graph: Graph,
    /// Payload of every const node, keyed by node id.
    pub consts: BTreeMap<String, Tensor64>,
    /// `log2 t` per quantizer group.
    pub thresholds: BTreeMap<String, f64>,
}

/// File name used for a generated constant.
pub fn const_file(id: &str) -> String {
    format!("{}.tqt", id.replace('/', "."))
}

impl Model {
    pub fn new(graph: Graph, consts: BTreeMap<String, Tensor64>) -> Result<Self> {
        let m = Model {
            graph,
            consts,
            thresholds: BTreeMap::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        for n in &self.graph.nodes {
            if matches!(n.op, Op::Const { .. }) && !self.consts.contains_key(&n.id) {
                return Err(GraphError::invalid(&n.id, "const node without payload"));
            }
        }
        self.groups()?;
        Ok(())
    }

    /// Quantizer groups in order of first appearance in the topological
    /// order, with their members.
    pub fn groups(&self) -> Result<Vec<(String, GroupInfo)>> {
        let mut out: Vec<(String, GroupInfo)> = Vec::new();
        for id in self.graph.topo_order()? {
            let node = self.graph.node(&id).unwrap();
            let Op::Quantize { bits, signed, group } = &node.op else { continue };
            match out.iter_mut().find(|(g, _)| g == group) {
                Some((_, info)) => {
                    if info.bits != *bits || info.signed != *signed {
                        return Err(GraphError::invalid(
                            &id,
                            format!("group '{group}' mixes precisions"),
                        ));
                    }
                    info.members.push(id.clone());
                }
                None => out.push((
                    group.clone(),
                    GroupInfo {
                        bits: *bits,
                        signed: *signed,
                        members: vec![id.clone()],
                    },
                )),
            }
        }
        Ok(out)
    }

    pub fn group_info(&self, group: &str) -> Result<GroupInfo> {
        self.groups()?
            .into_iter()
            .find(|(g, _)| g == group)
            .map(|(_, i)| i)
            .ok_or_else(|| GraphError::invalid(group, "unknown quantizer group"))
    }

    pub fn quantizer(&self, group: &str) -> Result<QuantizerParams<f64>> {
        let info = self.group_info(group)?;
        let log2_t = *self
            .thresholds
            .get(group)
            .ok_or_else(|| GraphError::invalid(group, "group has no threshold"))?;
        Ok(QuantizerParams::new(info.bits, info.signed, log2_t)?)
    }

    pub fn const_tensor(&self, id: &str) -> Result<&Tensor64> {
        self.consts
            .get(id)
            .ok_or_else(|| GraphError::invalid(id, "missing const payload"))
    }

    /// Drops payloads and thresholds no longer referenced by the graph.
    pub fn prune(&mut self) {
        let consts: BTreeSet<&str> = self
            .graph
            .nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Const { .. }))
            .map(|n| n.id.as_str())
            .collect();
        self.consts.retain(|k, _| consts.contains(k.as_str()));
        let groups: BTreeSet<String> = self
            .graph
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Quantize { group, .. } => Some(group.clone()),
                _ => None,
            })
            .collect();
        self.thresholds.retain(|k, _| groups.contains(k));
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(GRAPH_FILE), self.graph.serialize())?;
        for n in &self.graph.nodes {
            if let Op::Const { file, .. } = &n.op {
                write_tensor(dir.join(file), self.const_tensor(&n.id)?)?;
            }
        }
        let mut csv = String::from("group,log2_t\n");
        for (g, l) in &self.thresholds {
            csv.push_str(&format!("{g},{l}\n"));
        }
        fs::write(dir.join(THRESHOLDS_FILE), csv)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let graph = Graph::parse(&fs::read_to_string(dir.join(GRAPH_FILE))?)?;
        let mut consts = BTreeMap::new();
        for n in &graph.nodes {
            if let Op::Const { file, .. } = &n.op {
                consts.insert(n.id.clone(), read_tensor(dir.join(file))?);
            }
        }
        let mut thresholds = BTreeMap::new();
        let path = dir.join(THRESHOLDS_FILE);
        if path.exists() {
            for (i, line) in fs::read_to_string(path)?.lines().enumerate().skip(1) {
                let (g, l) = line.split_once(',').ok_or_else(|| GraphError::Parse {
                    line: i + 1,
                    node: String::new(),
                    msg: format!("malformed threshold row '{line}'"),
                })?;
                let l: f64 = l.trim().parse().map_err(|_| GraphError::Parse {
                    line: i + 1,
                    node: g.to_string(),
                    msg: format!("bad log2_t '{l}'"),
                })?;
                thresholds.insert(g.to_string(), l);
            }
        }
        let m = Model {
            graph,
            consts,
            thresholds,
        };
        m.validate()?;
        Ok(m)
    }
}
