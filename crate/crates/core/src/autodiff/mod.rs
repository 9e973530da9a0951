//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation is a method on [`Tape`] returning a [`Var`].
//! Calling [`Tape::backward`] on a scalar replays the recorded adjoint rules
//! in reverse order and accumulates gradients into leaves created with
//! `requires_grad`.

mod conv;
mod elementwise;
mod filters;
mod resample;
mod tape;

pub use filters::Axis;
pub use tape::{BackwardReport, NodeId, Tape, Var};

pub(crate) use resample::warp_forward;
