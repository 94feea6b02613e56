//! In-place editing primitives shared by the graph passes.

use std::collections::BTreeSet;

use crate::error::{GraphError, Result};
use crate::ir::{fresh_id, Graph, Node, Op};

impl Graph {
    pub fn contains(&self, id: &str) -> bool {
        self.node(id).is_some()
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub(crate) fn expect_node(&self, id: &str) -> Result<&Node> {
        self.node(id)
            .ok_or_else(|| GraphError::invalid(id, "no such node"))
    }

    /// `base` if unused, otherwise `base.1`, `base.2`, ...
    pub fn fresh_id(&self, base: &str) -> String {
        let taken: BTreeSet<String> = self.nodes.iter().map(|n| n.id.clone()).collect();
        fresh_id(&taken, base)
    }

    /// Consumers of `id`, or `None` when it is a graph output (whose value
    /// is observable) or has several readers.
    pub fn sole_consumer(&self, id: &str) -> Option<String> {
        if self.outputs.iter().any(|o| o == id) {
            return None;
        }
        let readers: Vec<&Node> = self
            .nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|i| i == id))
            .collect();
        match readers.as_slice() {
            [one] => Some(one.id.clone()),
            _ => None,
        }
    }

    /// Points every reader of `old` (and any output naming it) at `new`,
    /// leaving the nodes in `except` alone.
    pub fn replace_uses(&mut self, old: &str, new: &str, except: &[&str]) {
        for n in &mut self.nodes {
            if except.contains(&n.id.as_str()) {
                continue;
            }
            for i in &mut n.inputs {
                if i == old {
                    *i = new.to_string();
                }
            }
        }
        for o in &mut self.outputs {
            if o == old {
                *o = new.to_string();
            }
        }
    }

    /// Inserts `id = op(src)` and routes every former reader of `src`
    /// through it.
    pub fn interpose(&mut self, src: &str, id: &str, op: Op) {
        self.replace_uses(src, id, &[]);
        self.nodes.push(Node::new(id, op, &[src]));
    }

    pub fn remove(&mut self, id: &str) {
        self.nodes.retain(|n| n.id != id);
    }

    /// Removes nodes that no output depends on. Inputs are kept so the
    /// calling convention does not change.
    pub fn eliminate_dead(&mut self) {
        let mut live: BTreeSet<String> = self.outputs.iter().cloned().collect();
        let mut stack: Vec<String> = live.iter().cloned().collect();
        while let Some(id) = stack.pop() {
            if let Some(n) = self.node(&id) {
                for i in &n.inputs {
                    if live.insert(i.clone()) {
                        stack.push(i.clone());
                    }
                }
            }
        }
        self.nodes
            .retain(|n| n.op == Op::Input || live.contains(&n.id));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Graph {
        Graph::new(
            vec![
                Node::new("x", Op::Input, &[]),
                Node::new("a", Op::Relu, &["x"]),
                Node::new("b", Op::Relu6, &["a"]),
                Node::new("c", Op::Relu, &["a"]),
            ],
            vec!["b".into()],
        )
        .unwrap()
    }

    #[test]
    fn interpose_reroutes_all_readers() {
        let mut g = chain();
        g.interpose("a", "a/q", Op::Identity);
        assert_eq!(g.node("b").unwrap().inputs, vec!["a/q"]);
        assert_eq!(g.node("c").unwrap().inputs, vec!["a/q"]);
        assert_eq!(g.node("a/q").unwrap().inputs, vec!["a"]);
        g.validate().unwrap();
    }

    #[test]
    fn sole_consumer_respects_outputs_and_fanout() {
        let g = chain();
        assert_eq!(g.sole_consumer("x").as_deref(), Some("a"));
        assert_eq!(g.sole_consumer("a"), None);
        assert_eq!(g.sole_consumer("b"), None);
    }

    #[test]
    fn dead_nodes_go_but_inputs_stay() {
        let mut g = chain();
        g.outputs = vec!["x".into()];
        g.eliminate_dead();
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.fresh_id("x"), "x.1");
    }
}
