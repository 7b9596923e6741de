//! Minimal single-precision networks.
//!
//! Every reduction in this module accumulates sequentially in ascending index
//! order. Rust never reassociates or contracts float arithmetic on its own, so
//! the same inputs give the same bits on every call and every thread.

mod model;
pub mod ops;
mod params;
mod train;

pub use model::{forward, init_params, loss_and_grad, ForwardPass, ModelKind, ModelSpec};
pub use params::{Layout, LayoutEntry, ModelParams, Tensor};
pub use train::{sgd_step, sgd_step_in_place, train_local, LocalOutcome, LocalTraining};
