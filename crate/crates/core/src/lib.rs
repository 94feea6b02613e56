//! Core numerics for trained quantization thresholds: dense tensors, a
//! reverse-mode tape, the power-of-2 quantizer with its custom gradients,
//! calibration, and the optimizers used to train log-thresholds.
//!
//! Numeric code is generic over [`Real`] (`f32` and `f64`); the affine demo
//! is generic over any field and is exercised with [`Rational`].

pub mod affine;
pub mod calib;
pub mod error;
pub mod io;
pub mod ops;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use ops::{ConvGeometry, Padding};
pub use quant::QuantizerParams;
pub use rng::Rng;
pub use scalar::{DType, Element, Real};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type IntTensor = Tensor<i32>;
pub type Tape64 = Tape<f64>;
pub type Quantizer64 = QuantizerParams<f64>;
pub type Rational = num_rational::Ratio<i128>;
pub type AffineRational = affine::AffineParams<Rational>;
