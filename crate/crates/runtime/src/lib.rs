//! Integer-only inference for quantized graphs: lowering to fixed-point
//! operations with shift requantization, a checked 32-bit executor, the
//! deployment bundle, and a bit-exactness check against emulated
//! quantization.

pub mod bitexact;
pub mod error;
pub mod exec;
pub mod fixed;
pub mod kernels;
pub mod lower;
pub mod lowered;

pub use bitexact::{bitexact_check, BitexactReport, Mismatch};
pub use error::{Result, RuntimeError};
pub use exec::{execute_integer, execute_trace};
pub use fixed::{shift_requant, FixedPointTensor};
pub use lower::lower;
pub use lowered::{IntNode, IntOp, LoweredGraph};
