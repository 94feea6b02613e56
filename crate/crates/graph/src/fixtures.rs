//! Small float models covering each quantization topology: conv with
//! batch norm and ReLU6, residual add, leaky ReLU, average pooling into a
//! classifier, and nested concatenation. They take NHWC inputs of
//! [`FIXTURE_INPUT`] shape.

use tqt_core::{Padding, Rng, Tensor64};

use crate::builder::ModelBuilder;
use crate::ir::Op;
use crate::model::Model;

pub const FIXTURE_INPUT: [usize; 4] = [2, 6, 6, 3];

fn w(rng: &mut Rng, shape: &[usize]) -> Tensor64 {
    rng.normal_tensor(shape, 0.5)
}

fn bn(b: &mut ModelBuilder, rng: &mut Rng, id: &str, x: &str, c: usize) -> String {
    let gamma = rng.uniform_tensor(&[c], 0.5, 1.5);
    let beta = w(rng, &[c]);
    let mean = w(rng, &[c]);
    let var = rng.uniform_tensor(&[c], 0.5, 1.5);
    b.batch_norm(id, x, gamma, beta, mean, var, 1e-5)
}

pub fn conv_relu6(rng: &mut Rng) -> Model {
    let mut b = ModelBuilder::new();
    b.input("x");
    b.conv2d("conv", "x", w(rng, &[3, 3, 3, 4]), 1, Padding::Same);
    bn(&mut b, rng, "bn", "conv", 4);
    b.op("act", Op::Relu6, &["bn"]);
    b.output("act");
    b.build().unwrap()
}

pub fn eltwise(rng: &mut Rng) -> Model {
    let mut b = ModelBuilder::new();
    b.input("x");
    b.conv2d("c1", "x", w(rng, &[1, 1, 3, 4]), 1, Padding::Same);
    b.bias_add("c1b", "c1", w(rng, &[4]));
    b.op("r1", Op::Relu, &["c1b"]);
    b.conv2d("c2", "x", w(rng, &[3, 3, 3, 4]), 1, Padding::Same);
    b.op("add", Op::EltwiseAdd, &["r1", "c2"]);
    b.op("out", Op::Relu, &["add"]);
    b.output("out");
    b.build().unwrap()
}

pub fn leaky_relu(rng: &mut Rng) -> Model {
    let mut b = ModelBuilder::new();
    b.input("x");
    b.conv2d("conv", "x", w(rng, &[3, 3, 3, 2]), 2, Padding::Same);
    b.bias_add("bias", "conv", w(rng, &[2]));
    b.op("lrelu", Op::LeakyRelu { alpha: 0.1 }, &["bias"]);
    b.output("lrelu");
    b.build().unwrap()
}

pub fn avgpool(rng: &mut Rng) -> Model {
    let mut b = ModelBuilder::new();
    b.input("x");
    b.depthwise("dw", "x", w(rng, &[3, 3, 3, 1]), 1, Padding::Same);
    bn(&mut b, rng, "bn", "dw", 3);
    b.op("relu", Op::Relu, &["bn"]);
    b.op("pool", Op::AvgPool { k: 2, stride: 2 }, &["relu"]);
    b.op("flat", Op::Flatten, &["pool"]);
    b.matmul("fc", "flat", w(rng, &[27, 5]));
    b.bias_add("logits", "fc", w(rng, &[5]));
    b.output("logits");
    b.build().unwrap()
}

pub fn concat(rng: &mut Rng) -> Model {
    let mut b = ModelBuilder::new();
    b.input("x");
    b.conv2d("a", "x", w(rng, &[1, 1, 3, 2]), 1, Padding::Same);
    b.op("ra", Op::Relu, &["a"]);
    b.conv2d("b", "x", w(rng, &[3, 3, 3, 2]), 1, Padding::Same);
    b.op("rb", Op::Relu6, &["b"]);
    b.op("inner", Op::Concat, &["ra", "rb"]);
    b.op("cat", Op::Concat, &["inner", "x"]);
    b.op("id", Op::Identity, &["cat"]);
    b.output("id");
    b.build().unwrap()
}

pub type Fixture = (&'static str, fn(&mut Rng) -> Model);

pub const FIXTURES: [Fixture; 5] = [
    ("conv_relu6", conv_relu6),
    ("eltwise", eltwise),
    ("leaky_relu", leaky_relu),
    ("avgpool", avgpool),
    ("concat", concat),
];
