//! Bit-flip fault injection for neural network weights and the weight-scaling
//! defense: scale each layer by `c_i` before writing to fault-prone storage,
//! divide by `c_i` after reading it back.
//!
//! Modules, bottom-up:
//! - [`codec`]: bit-exact FP32 / FP16 / 8-bit fixed-point encode and decode.
//! - [`fault`]: Bernoulli bit-flip masks, XOR injection, the error function.
//! - [`guard`]: per-layer constants, outlier handling, protect and recover.
//! - [`analysis`]: Monte Carlo error curves and an exact 8-bit oracle.
//! - [`inference`]: dense ReLU networks and top-1 evaluation under faults.
//! - [`harness`]: experiment configs, runners, and result files.

pub mod analysis;
pub mod codec;
pub mod error;
pub mod fault;
pub mod guard;
pub mod harness;
pub mod inference;

pub use codec::{decode, encode, BitPattern, DType, DataTypeSpec, Overflow};
pub use error::{Error, Result};
pub use fault::{error as flip_error, inject, sample_mask, BitFlipMask, FaultConfig, MaskSampler, MaskStream, Protection};
pub use guard::{compute_constant, extract_outliers, protect, recover, LayerGuard, OutlierMode, StoredLayer};
pub use inference::{evaluate_top1, forward, forward_logit_division, Dataset, EvalResult, ExecMode, FaultPlan, Model};
