//! Function-preserving rewrites applied before quantization: batch-norm
//! folding, average pool to depthwise conv, concat flattening and identity
//! removal.

use std::collections::BTreeMap;

use tqt_core::{Padding, Tensor64};

use crate::error::{GraphError, Result};
use crate::exec::{forward, ExecOptions};
use crate::ir::{Node, Op};
use crate::model::{const_file, Model};

/// Shapes of every node value for the given input shapes, found by running
/// the float graph on zeros.
pub fn infer_shapes(model: &Model, input_shapes: &[Vec<usize>]) -> Result<BTreeMap<String, Vec<usize>>> {
    let inputs: Vec<Tensor64> = input_shapes.iter().map(|s| Tensor64::zeros(s)).collect();
    let f = forward(model, &inputs, &ExecOptions::float())?;
    Ok(f.values
        .iter()
        .map(|(id, &v)| (id.clone(), f.tape.value(v).shape().to_vec()))
        .collect())
}

fn const_of<'a>(model: &'a Model, id: &str, role: &str, user: &str) -> Result<&'a Tensor64> {
    match model.graph.node(id).map(|n| &n.op) {
        Some(Op::Const { .. }) => model.const_tensor(id),
        _ => Err(GraphError::transform(user, format!("{role} '{id}' is not a constant"))),
    }
}

/// Folds every batch norm into the conv2d, depthwise conv or matmul that
/// feeds it (optionally through a bias add):
/// `w' = w · gamma / sqrt(var + eps)` per output channel and
/// `b' = beta + (b - mean) · gamma / sqrt(var + eps)`.
pub fn fold_batchnorm(model: &mut Model) -> Result<()> {
    let bns: Vec<Node> = model
        .graph
        .topo_order()?
        .iter()
        .filter_map(|id| model.graph.node(id))
        .filter(|n| matches!(n.op, Op::BatchNorm { .. }))
        .cloned()
        .collect();
    for bn in bns {
        let Op::BatchNorm { eps } = bn.op else { unreachable!() };
        let g = &model.graph;
        let x = &bn.inputs[0];
        let producer = g.expect_node(x)?;
        let (compute, bias) = match &producer.op {
            op if op.is_compute() => (producer.clone(), None),
            Op::BiasAdd => {
                let c = g.expect_node(&producer.inputs[0])?;
                if !c.op.is_compute() || g.sole_consumer(&c.id).as_deref() != Some(producer.id.as_str()) {
                    return Err(GraphError::transform(&bn.id, "bias add before batch norm is not foldable"));
                }
                (c.clone(), Some(producer.clone()))
            }
            other => {
                return Err(GraphError::transform(
                    &bn.id,
                    format!("cannot fold batch norm into {}", other.name()),
                ))
            }
        };
        if g.sole_consumer(x).as_deref() != Some(bn.id.as_str()) {
            return Err(GraphError::transform(&bn.id, format!("'{x}' has readers besides the batch norm")));
        }
        let w_id = &compute.inputs[1];
        if g.sole_consumer(w_id).as_deref() != Some(compute.id.as_str()) {
            return Err(GraphError::transform(&bn.id, format!("weight '{w_id}' is shared")));
        }
        let gamma = const_of(model, &bn.inputs[1], "gamma", &bn.id)?.data().to_vec();
        let beta = const_of(model, &bn.inputs[2], "beta", &bn.id)?.data().to_vec();
        let mean = const_of(model, &bn.inputs[3], "mean", &bn.id)?.data().to_vec();
        let var = const_of(model, &bn.inputs[4], "var", &bn.id)?.data().to_vec();
        let c = gamma.len();
        if [beta.len(), mean.len(), var.len()] != [c, c, c] {
            return Err(GraphError::transform(&bn.id, "parameter lengths differ"));
        }
        let scale: Vec<f64> = gamma.iter().zip(&var).map(|(g, v)| g / (v + eps).sqrt()).collect();

        let w = const_of(model, w_id, "weight", &compute.id)?;
        let out_channels = match compute.op {
            Op::DepthwiseConv2d { .. } if w.rank() == 4 && w.shape()[3] == 1 => w.shape()[2],
            Op::DepthwiseConv2d { .. } => 0,
            _ => *w.shape().last().unwrap_or(&0),
        };
        if out_channels != c {
            return Err(GraphError::transform(
                &bn.id,
                format!("{c} batch-norm channels but weight '{w_id}' has {out_channels}"),
            ));
        }
        let mut w = w.clone();
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v *= scale[i % c];
        }
        model.consts.insert(w_id.clone(), w);

        match bias {
            Some(ba) => {
                let b_id = &ba.inputs[1];
                if model.graph.sole_consumer(b_id).as_deref() != Some(ba.id.as_str()) {
                    return Err(GraphError::transform(&bn.id, format!("bias '{b_id}' is shared")));
                }
                let b = const_of(model, b_id, "bias", &ba.id)?;
                b.expect_shape(&[c], "fold_batchnorm")?;
                let folded: Vec<f64> = (0..c).map(|k| beta[k] + (b.data()[k] - mean[k]) * scale[k]).collect();
                model.consts.insert(b_id.clone(), Tensor64::from_vec(folded));
                model.graph.replace_uses(&bn.id, &ba.id, &[]);
                model.graph.remove(&bn.id);
            }
            None => {
                let b_id = model.graph.fresh_id(&format!("{}/bias", compute.id));
                let folded: Vec<f64> = (0..c).map(|k| beta[k] - mean[k] * scale[k]).collect();
                model.consts.insert(b_id.clone(), Tensor64::from_vec(folded));
                model.graph.nodes.push(Node::new(
                    b_id.clone(),
                    Op::Const {
                        file: const_file(&b_id),
                        fixed: false,
                    },
                    &[],
                ));
                let n = model.graph.node_mut(&bn.id).unwrap();
                n.op = Op::BiasAdd;
                n.inputs = vec![x.clone(), b_id];
            }
        }
    }
    model.graph.eliminate_dead();
    model.prune();
    Ok(())
}

/// Rewrites each average pool as a depthwise conv with fixed weights
/// `1/k²`, marked `pool=true`.
pub fn avgpool_to_dwconv(model: &mut Model, shapes: &BTreeMap<String, Vec<usize>>) -> Result<()> {
    let pools: Vec<(String, String, usize, usize)> = model
        .graph
        .nodes
        .iter()
        .filter_map(|n| match n.op {
            Op::AvgPool { k, stride } => Some((n.id.clone(), n.inputs[0].clone(), k, stride)),
            _ => None,
        })
        .collect();
    for (id, x, k, stride) in pools {
        let channels = shapes
            .get(&x)
            .and_then(|s| s.last().copied())
            .ok_or_else(|| GraphError::transform(&id, "input shape unknown"))?;
        let w_id = model.graph.fresh_id(&format!("{id}/w"));
        let w = Tensor64::full(&[k, k, channels, 1], 1.0 / (k * k) as f64);
        model.consts.insert(w_id.clone(), w);
        model.graph.nodes.push(Node::new(
            w_id.clone(),
            Op::Const {
                file: const_file(&w_id),
                fixed: true,
            },
            &[],
        ));
        let n = model.graph.node_mut(&id).unwrap();
        n.op = Op::DepthwiseConv2d {
            stride,
            pad: Padding::Valid,
            pool: true,
        };
        n.inputs = vec![x, w_id];
    }
    Ok(())
}

/// Inlines concats whose only reader is another concat, and turns
/// single-input concats into identities.
pub fn collapse_concat(model: &mut Model) -> Result<()> {
    loop {
        let g = &model.graph;
        let mut change: Option<(String, usize, Vec<String>)> = None;
        'search: for n in &g.nodes {
            if n.op != Op::Concat {
                continue;
            }
            for (k, i) in n.inputs.iter().enumerate() {
                let inner = g.expect_node(i)?;
                if inner.op == Op::Concat && g.sole_consumer(i).as_deref() == Some(n.id.as_str()) {
                    change = Some((n.id.clone(), k, inner.inputs.clone()));
                    break 'search;
                }
            }
        }
        let Some((id, k, inner)) = change else { break };
        let n = model.graph.node_mut(&id).unwrap();
        n.inputs.splice(k..=k, inner);
        model.graph.eliminate_dead();
    }
    for n in &mut model.graph.nodes {
        if n.op == Op::Concat && n.inputs.len() == 1 {
            n.op = Op::Identity;
        }
    }
    Ok(())
}

/// Removes identity nodes. A graph output that named an identity is renamed
/// to the identity's input.
pub fn splice_identity(model: &mut Model) -> Result<()> {
    let ids: Vec<String> = model
        .graph
        .nodes
        .iter()
        .filter(|n| n.op == Op::Identity)
        .map(|n| n.id.clone())
        .collect();
    for id in ids {
        // Read the input now: an earlier splice may have rewritten it.
        let src = model.graph.expect_node(&id)?.inputs[0].clone();
        model.graph.replace_uses(&id, &src, &[]);
        model.graph.remove(&id);
    }
    Ok(())
}

/// All rewrites, in order, followed by dead-node removal and a canonical
/// topological node order.
pub fn optimize(model: &mut Model, input_shapes: &[Vec<usize>]) -> Result<()> {
    fold_batchnorm(model)?;
    let shapes = infer_shapes(model, input_shapes)?;
    avgpool_to_dwconv(model, &shapes)?;
    collapse_concat(model)?;
    splice_identity(model)?;
    model.graph.eliminate_dead();
    model.prune();
    model.graph = std::mem::take(&mut model.graph).sorted()?;
    model.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::ModelBuilder;
    use crate::exec::infer;
    use tqt_core::Rng;

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor64 {
        rng.normal_tensor(shape, 1.0)
    }

    fn pos(rng: &mut Rng, n: usize) -> Tensor64 {
        Tensor64::from_vec((0..n).map(|_| rng.uniform_range(0.5, 2.0)).collect())
    }

    fn bn(b: &mut ModelBuilder, rng: &mut Rng, id: &str, x: &str, c: usize) -> String {
        let (g, be, m, v) = (pos(rng, c), rand(rng, &[c]), rand(rng, &[c]), pos(rng, c));
        b.batch_norm(id, x, g, be, m, v, 1e-5)
    }

    fn assert_same(before: &Model, after: &Model, shape: &[usize], rng: &mut Rng) {
        for _ in 0..5 {
            let x = rand(rng, shape);
            let a = infer(before, &[x.clone()], &ExecOptions::float()).unwrap();
            let b = infer(after, &[x], &ExecOptions::float()).unwrap();
            assert!(a[0].max_abs_diff(&b[0]).unwrap() < 1e-9);
        }
    }

    #[test]
    fn folds_conv_dwconv_and_biased_matmul() {
        let mut rng = Rng::new(3);
        let mut b = ModelBuilder::new();
        b.input("x");
        b.conv2d("c1", "x", rand(&mut rng, &[3, 3, 2, 4]), 1, Padding::Same);
        bn(&mut b, &mut rng, "bn1", "c1", 4);
        b.depthwise("d1", "bn1", rand(&mut rng, &[3, 3, 4, 1]), 2, Padding::Same);
        bn(&mut b, &mut rng, "bn2", "d1", 4);
        b.op("f", Op::Flatten, &["bn2"]);
        b.matmul("m", "f", rand(&mut rng, &[16, 3]));
        b.bias_add("mb", "m", rand(&mut rng, &[3]));
        bn(&mut b, &mut rng, "bn3", "mb", 3);
        b.output("bn3");
        let before = b.build().unwrap();
        let mut after = before.clone();
        fold_batchnorm(&mut after).unwrap();
        assert!(after.graph.nodes.iter().all(|n| !matches!(n.op, Op::BatchNorm { .. })));
        assert_eq!(after.graph.outputs, vec!["mb"]);
        assert!(after.consts.keys().all(|k| !k.starts_with("bn")));
        assert_same(&before, &after, &[2, 4, 4, 2], &mut rng);
    }

    #[test]
    fn batch_norm_after_relu_is_rejected() {
        let mut rng = Rng::new(4);
        let mut b = ModelBuilder::new();
        b.input("x");
        b.op("r", Op::Relu, &["x"]);
        bn(&mut b, &mut rng, "bn", "r", 2);
        b.output("bn");
        let mut m = b.build().unwrap();
        let err = fold_batchnorm(&mut m).unwrap_err();
        assert!(matches!(err, GraphError::Transform { ref node, .. } if node == "bn"), "{err}");
    }

    #[test]
    fn avgpool_becomes_fixed_depthwise() {
        let mut rng = Rng::new(5);
        let mut b = ModelBuilder::new();
        b.input("x");
        b.op("p", Op::AvgPool { k: 2, stride: 2 }, &["x"]);
        b.output("p");
        let before = b.build().unwrap();
        let mut after = before.clone();
        optimize(&mut after, &[vec![1, 4, 4, 3]]).unwrap();
        let p = after.graph.node("p").unwrap();
        assert_eq!(
            p.op,
            Op::DepthwiseConv2d {
                stride: 2,
                pad: Padding::Valid,
                pool: true
            }
        );
        assert!(matches!(after.graph.node("p/w").unwrap().op, Op::Const { fixed: true, .. }));
        assert_eq!(after.consts["p/w"].shape(), &[2, 2, 3, 1]);
        assert_same(&before, &after, &[2, 4, 4, 3], &mut rng);
    }

    #[test]
    fn nested_concat_and_identities_disappear() {
        let mut b = ModelBuilder::new();
        b.input("x");
        b.op("a", Op::Relu, &["x"]);
        b.op("i", Op::Identity, &["a"]);
        b.op("k1", Op::Concat, &["i", "x"]);
        b.op("k2", Op::Concat, &["x", "k1"]);
        b.op("k3", Op::Concat, &["k2"]);
        b.output("k3");
        let mut m = b.build().unwrap();
        let mut rng = Rng::new(6);
        let before = m.clone();
        optimize(&mut m, &[vec![1, 2, 2, 1]]).unwrap();
        assert_eq!(m.graph.nodes.len(), 3);
        assert_eq!(m.graph.outputs, vec!["k3"]);
        assert_eq!(m.graph.node("k3").unwrap().inputs, vec!["x", "a", "x"]);
        assert_same(&before, &m, &[1, 2, 2, 1], &mut rng);
    }
}
