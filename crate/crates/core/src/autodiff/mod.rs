//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Values are recorded on a [`Tape`] as they are computed. Parameters live in
//! a [`ParamStore`] and enter the tape as leaves; [`Tape::backward`] sweeps the
//! tape in reverse and accumulates gradients into the store.

pub mod check;
mod param;
mod tape;
mod tensor;

pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};
