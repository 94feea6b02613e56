//! The desk-scale CNN used by the retraining experiments.
//!
//! Six weight layers on 32x32 inputs: a strided conv with batch norm and
//! ReLU6, a depthwise/pointwise pair closed by a residual add, two strided
//! branches (bias + leaky ReLU, batch norm + ReLU) joined by a concat, and
//! global average pooling into a linear classifier.

use tqt_core::{Padding, Rng, Tensor64};
use tqt_graph::{Model, ModelBuilder, Op};

use crate::data::{CHANNELS, CLASSES, IMAGE_SIZE};

pub const WIDTH: usize = 8;
pub const LEAKY_ALPHA: f64 = 0.1;

fn he(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor64 {
    rng.normal_tensor(shape, (2.0 / fan_in as f64).sqrt())
}

fn bn(b: &mut ModelBuilder, id: &str, x: &str, c: usize) -> String {
    b.batch_norm(
        id,
        x,
        Tensor64::ones(&[c]),
        Tensor64::zeros(&[c]),
        Tensor64::zeros(&[c]),
        Tensor64::ones(&[c]),
        1e-3,
    )
}

/// Freshly initialized float network with batch norm, expecting
/// `[N, 32, 32, 3]` inputs and producing `[N, 8]` logits.
pub fn desk_cnn(rng: &mut Rng) -> Model {
    let w = WIDTH;
    let mut b = ModelBuilder::new();
    b.input("x");

    b.conv2d("c1", "x", he(rng, &[3, 3, CHANNELS, w], 9 * CHANNELS), 2, Padding::Same);
    bn(&mut b, "c1/bn", "c1", w);
    b.op("c1/act", Op::Relu6, &["c1/bn"]);

    b.depthwise("dw", "c1/act", he(rng, &[3, 3, w, 1], 9), 1, Padding::Same);
    bn(&mut b, "dw/bn", "dw", w);
    b.op("dw/act", Op::Relu, &["dw/bn"]);
    b.conv2d("pw", "dw/act", he(rng, &[1, 1, w, w], w), 1, Padding::Same);
    bn(&mut b, "pw/bn", "pw", w);
    b.op("res", Op::EltwiseAdd, &["c1/act", "pw/bn"]);
    b.op("res/act", Op::Relu, &["res"]);

    b.conv2d("ca", "res/act", he(rng, &[3, 3, w, w], 9 * w), 2, Padding::Same);
    b.bias_add("ca/bias", "ca", Tensor64::zeros(&[w]));
    b.op("ca/act", Op::LeakyRelu { alpha: LEAKY_ALPHA }, &["ca/bias"]);
    b.conv2d("cb", "res/act", he(rng, &[3, 3, w, w], 9 * w), 2, Padding::Same);
    bn(&mut b, "cb/bn", "cb", w);
    b.op("cb/act", Op::Relu, &["cb/bn"]);
    b.op("cat", Op::Concat, &["ca/act", "cb/act"]);

    let side = IMAGE_SIZE / 4;
    b.op("pool", Op::AvgPool { k: side, stride: side }, &["cat"]);
    b.op("flat", Op::Flatten, &["pool"]);
    b.matmul("fc", "flat", he(rng, &[2 * w, CLASSES], 2 * w));
    b.bias_add("logits", "fc", Tensor64::zeros(&[CLASSES]));
    b.output("logits");
    b.build().expect("desk network is well formed")
}

/// Input shapes for a batch of `n` images.
pub fn input_shapes(n: usize) -> Vec<Vec<usize>> {
    vec![vec![n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use tqt_graph::passes::optimize;
    use tqt_graph::{infer, insert_quant_layers, ExecOptions, PrecisionConfig};

    #[test]
    fn produces_logits_and_survives_the_pipeline() {
        let mut rng = Rng::new(0);
        let mut m = desk_cnn(&mut rng);
        let x = rng.normal_tensor(&[2, 32, 32, 3], 1.0);
        let y = infer(&m, &[x.clone()], &ExecOptions::float()).unwrap();
        assert_eq!(y[0].shape(), &[2, CLASSES]);

        optimize(&mut m, &input_shapes(2)).unwrap();
        let folded = infer(&m, &[x], &ExecOptions::float()).unwrap();
        assert!(folded[0].max_abs_diff(&y[0]).unwrap() < 1e-9);

        insert_quant_layers(&mut m, PrecisionConfig::INT8).unwrap();
        let ops: Vec<&str> = m.graph.nodes.iter().map(|n| n.op.name()).collect();
        assert!(!ops.contains(&"batch_norm") && !ops.contains(&"avg_pool"));
        assert!(m.groups().unwrap().len() > 15);
    }
}
