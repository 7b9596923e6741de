//! Server side: client sampling, fixed-order FedAvg, evaluation, hashing,
//! and the round loop tying them to the engine.

mod simulation;

use std::sync::Arc;

use sha2::{Digest, Sha256};

pub use simulation::{
    run_simulation, Experiment, RoundLog, RoundObserver, ServerState, SimulationOutcome,
};

use crate::datahub::Dataset;
use crate::engine::{encode_params, UplinkPackage};
use crate::rngkit::{RngStream, SeedDomain};
use crate::tensornet::{forward, ops, Layout, ModelParams, ModelSpec};
use crate::{Error, Result};

/// The clients taking part in `round`, in the canonical order used for both
/// dispatch and aggregation.
pub fn sample_clients(base_seed: u64, round: u64, n_clients: usize, count: usize) -> Result<Vec<u64>> {
    let mut stream = RngStream::derived(base_seed, SeedDomain::ClientSampling, 0, round);
    Ok(stream
        .sample_without_replacement(n_clients, count)?
        .into_iter()
        .map(|c| c as u64)
        .collect())
}

/// `count_i / sum(count)` computed in `f64`, then rounded once to `f32`.
pub fn fedavg_weights(sample_counts: &[usize]) -> Vec<f32> {
    let total: f64 = sample_counts.iter().map(|&c| c as f64).sum();
    sample_counts.iter().map(|&c| (c as f64 / total) as f32).collect()
}

/// Sample-weighted mean of the uplinked parameters.
///
/// The accumulation runs strictly in list order, in `f32`: for each uplink
/// in turn, `acc[j] += w_i * params_i[j]` for ascending `j`. Callers fix the
/// result bits by fixing the list order.
pub fn fedavg(uplinks: &[UplinkPackage], layout: &Arc<Layout>) -> Result<ModelParams> {
    if uplinks.is_empty() {
        return Err(Error::invalid("fedavg needs at least one uplink"));
    }
    for u in uplinks {
        if u.updated_params.layout().as_ref() != layout.as_ref() {
            return Err(Error::invalid(format!(
                "uplink from client {} has a different parameter layout",
                u.client_id
            )));
        }
    }
    let counts: Vec<usize> = uplinks.iter().map(|u| u.sample_count).collect();
    let weights = fedavg_weights(&counts);
    // -0.0 is the exact additive identity, so a lone uplink comes back bit for bit.
    let mut acc = vec![-0.0f32; layout.total()];
    for (u, &w) in uplinks.iter().zip(&weights) {
        for (a, &v) in acc.iter_mut().zip(u.updated_params.values()) {
            *a += w * v;
        }
    }
    ModelParams::new(layout.clone(), acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Inference-mode accuracy and mean cross-entropy over `test_set`, visited
/// in dataset order. Predictions break ties toward the lowest class index.
pub fn evaluate(spec: &ModelSpec, params: &ModelParams, test_set: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if test_set.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty test set"));
    }
    if batch_size < 1 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let indices: Vec<usize> = (0..test_set.len()).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = test_set.gather(chunk)?;
        let pass = forward(spec, params, &batch, None)?;
        let n = spec.n_classes;
        for (b, &label) in labels.iter().enumerate() {
            if ops::argmax(&pass.logits.data()[b * n..(b + 1) * n]) == label {
                correct += 1;
            }
        }
        let (batch_loss, _) = ops::softmax_cross_entropy(pass.logits.data(), &labels, n);
        loss_sum += batch_loss * labels.len() as f64;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / test_set.len() as f64,
        loss: loss_sum / test_set.len() as f64,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical parameter bytes, as 64 lowercase hex digits.
pub fn model_hash(params: &ModelParams) -> String {
    sha256_hex(&encode_params(params))
}
