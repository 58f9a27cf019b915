//! Dynamic dual-sparsity for next-scale autoregressive transformers.
//!
//! The crate provides, desk-scale and fully deterministic:
//! - a minimal f64 reverse-mode autodiff engine ([`tensor`]),
//! - a toy next-scale transformer backbone ([`backbone`]),
//! - FFN-as-mixture-of-experts weight routing ([`moe`]),
//! - layer-adaptive token activation with reconstruction ([`gate`]),
//! - the two-stage distillation trainer ([`distill`]),
//! - an analytic FLOPs cost model ([`flops`]),
//! - synthetic multi-scale data and experiment orchestration
//!   ([`data`], [`harness`]).

pub mod backbone;
pub mod data;
pub mod distill;
pub mod error;
pub mod flops;
pub mod gate;
pub mod harness;
pub mod moe;
pub mod tensor;

pub use error::{Error, Result};
