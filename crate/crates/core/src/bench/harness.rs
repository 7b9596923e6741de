use crate::datahub::Dataset;
use crate::engine::{Collection, EngineConfig, Transport};
use crate::fedserver::{Experiment, RoundObserver, SimulationOutcome};
use crate::tensornet::{forward, ModelParams, ModelSpec};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct VerifyReport {
    /// Per run, the model hash after each round.
    pub hashes: Vec<Vec<String>>,
    pub final_accuracies: Vec<f64>,
    /// Per round, whether every run produced the same hash.
    pub round_agreement: Vec<bool>,
    /// 1-based.
    pub first_divergent_round: Option<u64>,
    /// Sample standard deviation of the final accuracy, in percentage points.
    pub accuracy_std_pp: f64,
    /// Runs `i` and `(i + 1) % n` form a pair; with two runs there is one pair.
    pub run_pairs: usize,
    /// Pairs whose hash sequences differ somewhere.
    pub disagreeing_pairs: usize,
    pub expected_agreement: bool,
    pub passed: bool,
}

impl VerifyReport {
    pub fn all_agree(&self) -> bool {
        self.first_divergent_round.is_none()
    }
}

/// Runs the experiment `repeats` times and compares the per-round hashes.
///
/// Without an explicit expectation, sampled-order collection must agree and
/// completion-order collection must not.
pub fn verify(experiment: &Experiment, repeats: usize, expect_agreement: Option<bool>) -> Result<VerifyReport> {
    if repeats < 2 {
        return Err(Error::invalid("verify needs at least 2 repeats"));
    }
    let expected_agreement = expect_agreement
        .unwrap_or(experiment.config().engine.collection == Collection::SampledOrder);
    let mut hashes = Vec::with_capacity(repeats);
    let mut final_accuracies = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let outcome = experiment.run()?;
        final_accuracies.push(outcome.final_accuracy().unwrap_or(0.0));
        hashes.push(outcome.hashes());
    }
    let rounds = hashes[0].len();
    let round_agreement: Vec<bool> = (0..rounds)
        .map(|r| hashes.iter().all(|h| h[r] == hashes[0][r]))
        .collect();
    let first_divergent_round = round_agreement.iter().position(|a| !a).map(|r| r as u64 + 1);
    let run_pairs = if repeats == 2 { 1 } else { repeats };
    let disagreeing_pairs = (0..run_pairs)
        .filter(|&i| hashes[i] != hashes[(i + 1) % repeats])
        .count();
    let agree = first_divergent_round.is_none();
    Ok(VerifyReport {
        accuracy_std_pp: sample_std(&final_accuracies) * 100.0,
        hashes,
        final_accuracies,
        round_agreement,
        first_divergent_round,
        run_pairs,
        disagreeing_pairs,
        expected_agreement,
        passed: agree == expected_agreement,
    })
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    // Shifted by the first value so identical inputs give exactly zero.
    let shift = values[0];
    let mean = values.iter().map(|v| v - shift).sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

/// Median of a non-empty list; the lower middle element for even lengths is
/// averaged with the upper one.
pub fn median(values: &[u64]) -> u64 {
    assert!(!values.is_empty(), "median of an empty list");
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        ((sorted[mid - 1] as u128 + sorted[mid] as u128) / 2) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub parallelism: usize,
    pub wall_nanos: u64,
    pub hashes: Vec<String>,
    pub final_accuracy: f64,
    /// Final accuracy minus the reference row's, in percentage points.
    pub delta_accuracy_pp: f64,
    /// Whether every round hash matches the reference row.
    pub hash_agreement: bool,
}

/// One run per parallelism level with everything else fixed. The reference
/// row is `P = 1` when present, otherwise the first level listed.
pub fn sweep(experiment: &Experiment, levels: &[usize]) -> Result<Vec<SweepRow>> {
    if levels.is_empty() {
        return Err(Error::invalid("sweep needs at least one parallelism level"));
    }
    let base = experiment.config().engine;
    let mut runs: Vec<(usize, SimulationOutcome)> = Vec::with_capacity(levels.len());
    for &p in levels {
        let engine = EngineConfig { parallelism: p, ..base };
        runs.push((p, experiment.with_engine(engine).run()?));
    }
    let reference = levels.iter().position(|&p| p == 1).unwrap_or(0);
    let ref_hashes = runs[reference].1.hashes();
    let ref_acc = runs[reference].1.final_accuracy().unwrap_or(0.0);
    Ok(runs
        .into_iter()
        .map(|(p, outcome)| {
            let acc = outcome.final_accuracy().unwrap_or(0.0);
            let hashes = outcome.hashes();
            SweepRow {
                parallelism: p,
                wall_nanos: outcome.loop_wall_nanos,
                hash_agreement: hashes == ref_hashes,
                hashes,
                final_accuracy: acc,
                delta_accuracy_pp: (acc - ref_acc) * 100.0,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportComparison {
    pub shared_nanos: Vec<u64>,
    pub serialized_nanos: Vec<u64>,
    pub shared_median: u64,
    pub serialized_median: u64,
    /// Shared median over serialized median.
    pub ratio: f64,
    /// Whether both transports produced the same hashes in every repetition.
    pub hashes_match: bool,
}

/// Alternates the two transports `repetitions` times each, timing the round
/// loop only.
pub fn compare_transports(experiment: &Experiment, repetitions: usize) -> Result<TransportComparison> {
    if repetitions < 1 {
        return Err(Error::invalid("repetitions must be at least 1"));
    }
    let base = experiment.config().engine;
    let shared = experiment.with_engine(EngineConfig {
        transport: Transport::SharedMemory,
        ..base
    });
    let serialized = experiment.with_engine(EngineConfig {
        transport: Transport::SerializedChannel,
        ..base
    });
    let mut shared_nanos = Vec::with_capacity(repetitions);
    let mut serialized_nanos = Vec::with_capacity(repetitions);
    let mut hashes_match = true;
    for _ in 0..repetitions {
        let a = shared.run()?;
        let b = serialized.run()?;
        hashes_match &= a.hashes() == b.hashes();
        shared_nanos.push(a.loop_wall_nanos);
        serialized_nanos.push(b.loop_wall_nanos);
    }
    let shared_median = median(&shared_nanos);
    let serialized_median = median(&serialized_nanos);
    Ok(TransportComparison {
        ratio: shared_median as f64 / serialized_median.max(1) as f64,
        shared_nanos,
        serialized_nanos,
        shared_median,
        serialized_median,
        hashes_match,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergeRow {
    /// 1-based; the logits are taken from the model this round starts with.
    pub round: u64,
    pub run: usize,
    /// Distance of this run's probe logits from the mean over all runs.
    pub l2_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergeReport {
    pub rows: Vec<DivergeRow>,
    /// Largest distance per round.
    pub max_per_round: Vec<f64>,
    /// Share of consecutive round pairs where the maximum does not shrink.
    pub nondecreasing_fraction: f64,
}

struct Probe<'a> {
    sample: &'a [f32],
    shape: [usize; 3],
    logits: Vec<Vec<f32>>,
}

impl RoundObserver for Probe<'_> {
    fn round_start(&mut self, _round: u64, spec: &ModelSpec, global: &ModelParams) -> Result<()> {
        let [c, h, w] = self.shape;
        let batch = crate::tensornet::Tensor::new(vec![1, c, h, w], self.sample.to_vec())?;
        let pass = forward(spec, global, &batch, None)?;
        self.logits.push(pass.logits.into_data());
        Ok(())
    }
}

/// Repeats the experiment `runs` times and tracks how far the inference
/// logits of one probe sample drift apart across runs, round by round. The
/// probe is the `probe_sample`-th entry of `probe_client`'s local data.
pub fn diverge(experiment: &Experiment, runs: usize, probe_client: usize, probe_sample: usize) -> Result<DivergeReport> {
    if runs < 2 {
        return Err(Error::invalid("diverge needs at least 2 runs"));
    }
    let partition = experiment.partition();
    if probe_client >= partition.n_clients {
        return Err(Error::invalid(format!(
            "probe client {probe_client} is out of range for {} clients",
            partition.n_clients
        )));
    }
    let local = partition.client(probe_client);
    let index = *local.get(probe_sample).ok_or_else(|| {
        Error::invalid(format!(
            "probe sample {probe_sample} is out of range for client {probe_client} with {} samples",
            local.len()
        ))
    })?;
    let train: &Dataset = experiment.train_set();
    let mut per_run = Vec::with_capacity(runs);
    for _ in 0..runs {
        let mut probe = Probe {
            sample: train.sample(index),
            shape: train.sample_shape(),
            logits: Vec::new(),
        };
        experiment.run_observed(&mut probe)?;
        per_run.push(probe.logits);
    }
    let rounds = per_run[0].len();
    let mut rows = Vec::with_capacity(rounds * runs);
    let mut max_per_round = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let width = per_run[0][r].len();
        let mut mean = vec![0.0f64; width];
        for run in &per_run {
            for (m, &v) in mean.iter_mut().zip(&run[r]) {
                *m += f64::from(v);
            }
        }
        for m in &mut mean {
            *m /= runs as f64;
        }
        let mut max = 0.0f64;
        for (i, run) in per_run.iter().enumerate() {
            let d = run[r]
                .iter()
                .zip(&mean)
                .map(|(&v, &m)| (f64::from(v) - m).powi(2))
                .sum::<f64>()
                .sqrt();
            max = max.max(d);
            rows.push(DivergeRow {
                round: r as u64 + 1,
                run: i,
                l2_distance: d,
            });
        }
        max_per_round.push(max);
    }
    let steps = max_per_round.len().saturating_sub(1);
    let nondecreasing = max_per_round.windows(2).filter(|w| w[1] >= w[0]).count();
    Ok(DivergeReport {
        rows,
        nondecreasing_fraction: if steps == 0 { 1.0 } else { nondecreasing as f64 / steps as f64 },
        max_per_round,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_std() {
        assert_eq!(median(&[5, 1, 3]), 3);
        assert_eq!(median(&[4, 1, 3, 2]), 2);
        assert_eq!(sample_std(&[1.0]), 0.0);
        assert!((sample_std(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(sample_std(&[0.1 + 0.2; 10]), 0.0);
    }
}
