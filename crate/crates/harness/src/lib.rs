//! Experiments around trained quantization thresholds: the single-quantizer
//! L2 toy problem, the desk-scale retraining pipeline, and the helpers
//! behind the `tqt` command line.

pub mod checks;
pub mod data;
pub mod desk;
pub mod error;
pub mod suite;
pub mod toy;
pub mod train;

pub use error::{HarnessError, Result};
