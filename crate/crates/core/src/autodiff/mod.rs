//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The split is deliberate: [`Tensor`] is a plain immutable value (safe to
//! share across threads, e.g. trained model parameters), while [`Var`] is a
//! handle into a per-forward-pass [`Tape`]. Rebuilding the tape every pass
//! keeps graphs whose structure depends on runtime scalars (a learnable
//! start time changes every step size) trivially correct.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{GradError, Tape, Var};
pub use tensor::Tensor;
