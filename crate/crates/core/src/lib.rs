//! Deterministic single-node federated learning simulation.
//!
//! Virtual clients run as jobs on a worker pool that shares one address
//! space with the server. Every source of client-local randomness is an
//! isolated stream derived from `(base_seed, domain, client, round)`, and
//! client results are aggregated in sampled order, so a simulation produces
//! bitwise-identical global models regardless of how many workers run it.
//!
//! Module map:
//!
//! * [`rngkit`]: seed derivation and per-client random streams.
//! * [`tensornet`]: small single-precision networks with fixed-order reductions.
//! * [`datahub`]: synthetic and CIFAR-10 data, label-skew partitions, augmentation.
//! * [`engine`]: the worker pool and round execution with selectable transport.
//! * [`fedserver`]: client sampling, FedAvg, evaluation, hashing, the round loop.
//! * [`bench`]: experiment configuration and the verify/sweep/diverge harness.

pub mod bench;
pub mod datahub;
pub mod engine;
mod error;
pub mod fedserver;
pub mod rngkit;
pub mod tensornet;

pub use error::{Error, Result};
