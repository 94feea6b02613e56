//! Graph IR for quantization: a text-serializable dataflow graph, the float
//! rewrites that prepare it, quantizer insertion, calibration and a
//! differentiable executor used for emulated-quantization training.

pub mod builder;
pub mod calibrate;
mod edit;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod ir;
pub mod model;
pub mod passes;
pub mod quantize;

pub use builder::ModelBuilder;
pub use error::{GraphError, Result};
pub use exec::{forward, infer, BnMode, ExecOptions, Forward};
pub use ir::{Graph, Node, Op};
pub use model::{GroupInfo, Model};
pub use quantize::{insert_quant_layers, PrecisionConfig};
