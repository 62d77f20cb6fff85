//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Three pieces:
//! - [`kernels`]: raw slice-level numeric routines. Training and inference
//!   both call these, which is what makes cached and recomputed paths
//!   bit-identical.
//! - [`tape`]: the recording [`tape::Tape`] with forward ops and exact
//!   reverse-mode gradients, plus a [`tape::CustomOp`] hook for losses whose
//!   backward rules live downstream.
//! - [`check`]: central-difference gradient verification.

pub mod check;
pub mod kernels;
pub mod tape;

pub use check::{grad_check, grad_check_coords, grad_check_sampled, rel_err, CheckInput};
pub use tape::{CustomCtx, CustomOp, Tape, TensorId};
