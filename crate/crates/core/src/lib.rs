//! Selective state-space vision backbones built on a small reverse-mode
//! autodiff engine.
//!
//! The crate covers the S6 selective scan, the four-direction 2-D cross
//! scan, VSS blocks, the hierarchical VMamba backbone with its optional
//! global-residual path, the training recipe, and dataset analysis tools.

// Index loops walk several parallel buffers; `!(x > 0)` comparisons are
// meant to reject NaN as well.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod cross_scan;
pub mod dataset;
pub mod error;
pub mod model;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod vss;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result, TensorError};
pub use tensor::{Real, Tensor};
