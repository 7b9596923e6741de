use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, fedavg, model_hash, sample_clients};
use crate::bench::{DatasetSource, ExperimentConfig, PartitionSource};
use crate::datahub::{
    generate_synthetic_split, load_cifar10_binary, load_cifar10_test, load_partition, partition_label_skew, Dataset,
    Partition,
};
use crate::engine::{client_jobs, ClientContext, ClientFn, ClientUpdate, DownlinkPackage, Engine, EngineConfig};
use crate::rngkit::{RngStream, SeedDomain};
use crate::tensornet::{init_params, train_local, LocalTraining, ModelParams, ModelSpec};
use crate::{Error, Result};

/// One line of `rounds.jsonl`. Rounds are numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u64,
    pub model_hash: String,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Wall time of the round; `None` in timing-stripped output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_nanos: Option<u64>,
    pub config_fingerprint: String,
}

impl RoundLog {
    pub fn without_timing(&self) -> RoundLog {
        RoundLog {
            wall_nanos: None,
            ..self.clone()
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("round log serializes")
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    /// Completed aggregations so far.
    pub round: u64,
    pub global_params: Arc<ModelParams>,
    pub base_seed: u64,
    pub history: Vec<RoundLog>,
}

/// Hooks into the round loop. Both run on the coordinator thread between
/// engine rounds.
pub trait RoundObserver {
    /// Called before round `round` (1-based) samples its clients, with the
    /// global model that round starts from.
    fn round_start(&mut self, _round: u64, _spec: &ModelSpec, _global: &ModelParams) -> Result<()> {
        Ok(())
    }

    fn round_end(&mut self, _log: &RoundLog) -> Result<()> {
        Ok(())
    }
}

impl RoundObserver for () {}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub logs: Vec<RoundLog>,
    pub initial_hash: String,
    pub final_state: ServerState,
    /// Wall time of the round loop alone (no data preparation).
    pub loop_wall_nanos: u64,
}

impl SimulationOutcome {
    pub fn hashes(&self) -> Vec<String> {
        self.logs.iter().map(|l| l.model_hash.clone()).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.logs.last().map(|l| l.test_accuracy)
    }
}

/// A configuration with its data and partition materialised, ready to run
/// any number of times.
pub struct Experiment {
    config: ExperimentConfig,
    train: Arc<Dataset>,
    test: Dataset,
    partition: Arc<Partition>,
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate_inputs()?;
        let (train, test) = match &config.dataset {
            DatasetSource::Synthetic(s) => {
                generate_synthetic_split(s.n_classes, s.train_per_class, s.test_per_class, s.shape, s.seed)?
            }
            DatasetSource::Cifar10 { path } => (load_cifar10_binary(path)?, load_cifar10_test(path)?),
        };
        let partition = match &config.partition {
            PartitionSource::Inline {
                classes_per_client,
                samples_per_client,
                seed,
            } => partition_label_skew(
                &train,
                config.clients_total,
                *classes_per_client,
                *samples_per_client,
                seed.unwrap_or(config.base_seed),
            )?,
            PartitionSource::File { path } => {
                let p = load_partition(path)?;
                p.validate(Some(train.len()))?;
                p
            }
        };
        if partition.n_clients != config.clients_total {
            return Err(Error::config(
                "clients_total",
                format!("partition holds {} clients", partition.n_clients),
            ));
        }
        if let Some(empty) = partition.assignment.iter().position(|a| a.is_empty()) {
            return Err(Error::invalid(format!("client {empty} has no samples in the partition")));
        }
        Ok(Experiment {
            config: config.clone(),
            train: Arc::new(train),
            test,
            partition: Arc::new(partition),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    /// The same data with a different engine configuration.
    pub fn with_engine(&self, engine: EngineConfig) -> Experiment {
        Experiment {
            config: ExperimentConfig {
                engine,
                ..self.config.clone()
            },
            train: self.train.clone(),
            test: self.test.clone(),
            partition: self.partition.clone(),
        }
    }

    pub fn initial_params(&self) -> Result<ModelParams> {
        let mut stream = RngStream::derived(self.config.base_seed, SeedDomain::ServerInit, 0, 0);
        init_params(&self.config.model, &mut stream)
    }

    /// The local-training job every sampled client runs.
    pub fn client_fn(&self) -> ClientFn {
        let spec = self.config.model.clone();
        let train = self.train.clone();
        let partition = self.partition.clone();
        let settings = LocalTraining {
            epochs: self.config.epochs,
            batch_size: self.config.batch_size,
            lr: self.config.lr as f32,
            augment: self.config.augment,
        };
        Arc::new(move |ctx: ClientContext<'_>| {
            let mut suite = ctx.suite;
            let indices = partition
                .assignment
                .get(ctx.client_id as usize)
                .ok_or_else(|| Error::invalid(format!("client {} is not in the partition", ctx.client_id)))?;
            let out = train_local(&spec, ctx.global_params, &train, indices, &settings, &mut suite)?;
            Ok(ClientUpdate {
                params: out.params,
                sample_count: out.sample_count,
                train_loss: out.mean_loss,
            })
        })
    }

    pub fn run(&self) -> Result<SimulationOutcome> {
        self.run_observed(&mut ())
    }

    /// Initialise, then per round: sample, dispatch, aggregate in the order
    /// the engine returns, evaluate, hash, log.
    pub fn run_observed(&self, observer: &mut dyn RoundObserver) -> Result<SimulationOutcome> {
        let config = &self.config;
        let fingerprint = config.fingerprint();
        let initial = self.initial_params()?;
        let initial_hash = model_hash(&initial);
        let mut state = ServerState {
            round: 0,
            global_params: Arc::new(initial),
            base_seed: config.base_seed,
            history: Vec::with_capacity(config.rounds as usize),
        };
        let client_fn = self.client_fn();
        let mut engine = Engine::new(config.engine)?;

        let loop_start = Instant::now();
        for round in 0..config.rounds {
            let round_start = Instant::now();
            observer.round_start(round + 1, &config.model, &state.global_params)?;
            let clients = sample_clients(config.base_seed, round, config.clients_total, config.clients_per_round)?;
            let downlink = DownlinkPackage {
                round,
                global_params: state.global_params.clone(),
            };
            let jobs = client_jobs(config.base_seed, round, &clients);
            let uplinks = engine.run_round(&downlink, jobs, &client_fn)?;
            drop(downlink);
            let aggregated = fedavg(&uplinks, state.global_params.layout())?;
            drop(uplinks);
            let eval = evaluate(&config.model, &aggregated, &self.test, config.eval_batch_size)?;
            let log = RoundLog {
                round: round + 1,
                model_hash: model_hash(&aggregated),
                test_accuracy: eval.accuracy,
                test_loss: eval.loss,
                wall_nanos: Some(round_start.elapsed().as_nanos() as u64),
                config_fingerprint: fingerprint.clone(),
            };
            state.global_params = Arc::new(aggregated);
            state.round += 1;
            observer.round_end(&log)?;
            state.history.push(log);
        }
        let loop_wall_nanos = loop_start.elapsed().as_nanos() as u64;
        Ok(SimulationOutcome {
            logs: state.history.clone(),
            initial_hash,
            final_state: state,
            loop_wall_nanos,
        })
    }
}

/// Prepares the data for `config` and runs every round.
pub fn run_simulation(config: &ExperimentConfig) -> Result<Vec<RoundLog>> {
    Ok(Experiment::prepare(config)?.run()?.logs)
}
