//! Round execution on a worker pool.
//!
//! A round hands every sampled client a [`DownlinkPackage`] plus its own
//! [`RngStreamSuite`], runs the client function on up to `P` workers, and
//! returns one [`UplinkPackage`] per client after all jobs have finished.
//!
//! Two knobs select how a round behaves:
//!
//! * [`Transport`]: workers either read the global parameters through a
//!   shared `Arc` or receive them as canonical bytes over a channel and
//!   decode them (and encode their results the same way).
//! * [`Collection`]: results come back either in sampled order, which makes
//!   the uplink list independent of scheduling, or in completion order,
//!   which does not.

mod codec;
mod pool;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use crossbeam::channel::{bounded, unbounded, Receiver};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use codec::{decode_params, encode_params, encoded_len, PARAMS_MAGIC};
use pool::WorkerPool;

use crate::rngkit::RngStreamSuite;
use crate::tensornet::ModelParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    SharedMemory,
    SerializedChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collection {
    SampledOrder,
    /// Nondeterministic by construction.
    CompletionOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub parallelism: usize,
    pub transport: Transport,
    pub collection: Collection,
    /// Upper bound of a uniform busy-wait added to each job. Only applied
    /// under [`Collection::CompletionOrder`].
    #[serde(default)]
    pub jitter_micros: u64,
}

impl EngineConfig {
    pub fn deterministic(parallelism: usize, transport: Transport) -> Self {
        EngineConfig {
            parallelism,
            transport,
            collection: Collection::SampledOrder,
            jitter_micros: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallelism < 1 {
            return Err(Error::invalid("parallelism must be at least 1"));
        }
        Ok(())
    }
}

/// Server-to-client payload. The parameters are never mutated while a
/// round runs.
#[derive(Debug, Clone)]
pub struct DownlinkPackage {
    pub round: u64,
    pub global_params: Arc<ModelParams>,
}

/// Client-to-server payload.
#[derive(Debug, Clone)]
pub struct UplinkPackage {
    pub client_id: u64,
    pub updated_params: ModelParams,
    pub sample_count: usize,
    pub train_loss: f64,
    pub compute_nanos: u64,
}

/// One client's slot in a round. The suite moves to whichever worker runs
/// the job.
#[derive(Debug, Clone)]
pub struct ClientJob {
    pub client_id: u64,
    pub suite: RngStreamSuite,
}

/// Jobs for `clients` in the given order, each with its own freshly derived suite.
pub fn client_jobs(base_seed: u64, round: u64, clients: &[u64]) -> Vec<ClientJob> {
    clients
        .iter()
        .map(|&client_id| ClientJob {
            client_id,
            suite: RngStreamSuite::new(base_seed, client_id, round),
        })
        .collect()
}

/// What a client function sees.
pub struct ClientContext<'a> {
    pub round: u64,
    pub client_id: u64,
    pub global_params: &'a ModelParams,
    pub suite: RngStreamSuite,
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub params: ModelParams,
    pub sample_count: usize,
    pub train_loss: f64,
}

/// The per-client job. It must be a pure function of its context.
pub type ClientFn = Arc<dyn Fn(ClientContext<'_>) -> Result<ClientUpdate> + Send + Sync>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseBreakdown {
    pub dispatch_nanos: u64,
    pub compute_nanos: u64,
    pub collect_nanos: u64,
}

#[derive(Debug, Clone)]
pub struct TimedRound {
    pub uplinks: Vec<UplinkPackage>,
    pub wall_nanos: u64,
    /// Advisory only; not covered by any determinism guarantee.
    pub breakdown: PhaseBreakdown,
}

enum Downlink {
    Shared(Arc<ModelParams>),
    Bytes(Vec<u8>),
}

enum UplinkParams {
    Value(ModelParams),
    Bytes(Vec<u8>),
}

struct RawUplink {
    client_id: u64,
    params: UplinkParams,
    sample_count: usize,
    train_loss: f64,
    compute_nanos: u64,
}

type Outcome = Result<RawUplink>;

struct PreparedJob {
    slot: usize,
    job: ClientJob,
    downlink: Downlink,
}

enum Sink {
    Slots(Vec<OnceLock<Outcome>>),
    Arrivals(Mutex<Vec<Outcome>>),
}

impl Sink {
    fn store(&self, slot: usize, outcome: Outcome) {
        match self {
            Sink::Slots(slots) => {
                if slots[slot].set(outcome).is_err() {
                    unreachable!("slot {slot} written twice");
                }
            }
            Sink::Arrivals(list) => list.lock().unwrap_or_else(|e| e.into_inner()).push(outcome),
        }
    }

    fn into_outcomes(self) -> Vec<Outcome> {
        match self {
            Sink::Slots(slots) => slots
                .into_iter()
                .map(|s| s.into_inner().expect("barrier guarantees every slot is filled"))
                .collect(),
            Sink::Arrivals(list) => list.into_inner().unwrap_or_else(|e| e.into_inner()),
        }
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic with a non-string payload".to_string()
    }
}

fn busy_wait(duration: Duration) {
    let start = Instant::now();
    while start.elapsed() < duration {
        std::hint::spin_loop();
    }
}

struct WorkerShared {
    client_fn: ClientFn,
    round: u64,
    layout: Arc<crate::tensornet::Layout>,
    jitter_micros: u64,
    sink: Sink,
}

fn execute(shared: &WorkerShared, prepared: PreparedJob) -> Outcome {
    let PreparedJob { job, downlink, .. } = prepared;
    let client_id = job.client_id;
    let decoded;
    let global: &ModelParams = match &downlink {
        Downlink::Shared(params) => params,
        Downlink::Bytes(bytes) => {
            decoded = decode_params(bytes, &shared.layout).map_err(|e| Error::ClientFailed {
                client_id,
                reason: format!("downlink decode: {e}"),
            })?;
            &decoded
        }
    };
    let start = Instant::now();
    let ctx = ClientContext {
        round: shared.round,
        client_id,
        global_params: global,
        suite: job.suite,
    };
    let update = match catch_unwind(AssertUnwindSafe(|| (shared.client_fn)(ctx))) {
        Ok(Ok(update)) => update,
        Ok(Err(e)) => {
            return Err(Error::ClientFailed {
                client_id,
                reason: e.to_string(),
            })
        }
        Err(payload) => {
            return Err(Error::ClientFailed {
                client_id,
                reason: panic_message(payload.as_ref()),
            })
        }
    };
    if shared.jitter_micros > 0 {
        let micros = rand::thread_rng().gen_range(0..=shared.jitter_micros);
        busy_wait(Duration::from_micros(micros));
    }
    let compute_nanos = start.elapsed().as_nanos() as u64;
    if update.sample_count == 0 {
        return Err(Error::ClientFailed {
            client_id,
            reason: "reported zero training samples".into(),
        });
    }
    if !update.params.same_layout(global) {
        return Err(Error::ClientFailed {
            client_id,
            reason: "returned parameters with a different layout".into(),
        });
    }
    let params = match downlink {
        Downlink::Shared(_) => UplinkParams::Value(update.params),
        Downlink::Bytes(_) => UplinkParams::Bytes(encode_params(&update.params)),
    };
    Ok(RawUplink {
        client_id,
        params,
        sample_count: update.sample_count,
        train_loss: update.train_loss,
        compute_nanos,
    })
}

/// Round executor owning a worker pool that lives as long as the engine.
pub struct Engine {
    config: EngineConfig,
    pool: WorkerPool,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Engine {
            pool: WorkerPool::new(config.parallelism),
            config,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Worker threads started so far.
    pub fn spawned_workers(&self) -> usize {
        self.pool.spawned()
    }

    pub fn run_round(
        &mut self,
        downlink: &DownlinkPackage,
        jobs: Vec<ClientJob>,
        client_fn: &ClientFn,
    ) -> Result<Vec<UplinkPackage>> {
        self.run_round_timed(downlink, jobs, client_fn).map(|t| t.uplinks)
    }

    /// Runs one round on `min(P, jobs.len())` workers and returns after every
    /// job has finished. Any failed job fails the whole round.
    pub fn run_round_timed(
        &mut self,
        downlink: &DownlinkPackage,
        jobs: Vec<ClientJob>,
        client_fn: &ClientFn,
    ) -> Result<TimedRound> {
        let start = Instant::now();
        let n = jobs.len();
        if n == 0 {
            return Ok(TimedRound {
                uplinks: Vec::new(),
                wall_nanos: start.elapsed().as_nanos() as u64,
                breakdown: PhaseBreakdown::default(),
            });
        }
        let workers = self.config.parallelism.min(n);
        self.pool.ensure_workers(workers);

        let layout = downlink.global_params.layout().clone();
        let sink = match self.config.collection {
            Collection::SampledOrder => Sink::Slots((0..n).map(|_| OnceLock::new()).collect()),
            Collection::CompletionOrder => Sink::Arrivals(Mutex::new(Vec::with_capacity(n))),
        };
        let jitter_micros = match self.config.collection {
            Collection::CompletionOrder => self.config.jitter_micros,
            Collection::SampledOrder => 0,
        };
        let shared = Arc::new(WorkerShared {
            client_fn: client_fn.clone(),
            round: downlink.round,
            layout: layout.clone(),
            jitter_micros,
            sink,
        });

        // Each worker drains the job queue until it is closed and empty.
        let (job_tx, job_rx) = unbounded::<PreparedJob>();
        let (done_tx, done_rx) = bounded::<()>(n);
        for _ in 0..workers {
            let job_rx: Receiver<PreparedJob> = job_rx.clone();
            let done_tx = done_tx.clone();
            let shared = shared.clone();
            self.pool.submit(Box::new(move || {
                while let Ok(prepared) = job_rx.recv() {
                    let slot = prepared.slot;
                    let outcome = execute(&shared, prepared);
                    shared.sink.store(slot, outcome);
                    let _ = done_tx.send(());
                }
            }));
        }
        drop(done_tx);

        for (slot, job) in jobs.into_iter().enumerate() {
            let payload = match self.config.transport {
                Transport::SharedMemory => Downlink::Shared(downlink.global_params.clone()),
                Transport::SerializedChannel => Downlink::Bytes(encode_params(&downlink.global_params)),
            };
            job_tx
                .send(PreparedJob {
                    slot,
                    job,
                    downlink: payload,
                })
                .expect("workers hold the job receiver");
        }
        drop(job_tx);
        let dispatched = Instant::now();

        for _ in 0..n {
            done_rx.recv().expect("every job signals completion");
        }
        let computed = Instant::now();

        // The drain tasks may still hold their clones for an instant after
        // signalling the last job.
        let mut shared = shared;
        let shared = loop {
            match Arc::try_unwrap(shared) {
                Ok(inner) => break inner,
                Err(still_held) => {
                    shared = still_held;
                    std::thread::yield_now();
                }
            }
        };
        let outcomes = shared.sink.into_outcomes();
        let mut uplinks = Vec::with_capacity(n);
        for outcome in outcomes {
            let raw = outcome?;
            let updated_params = match raw.params {
                UplinkParams::Value(p) => p,
                UplinkParams::Bytes(bytes) => decode_params(&bytes, &layout)?,
            };
            uplinks.push(UplinkPackage {
                client_id: raw.client_id,
                updated_params,
                sample_count: raw.sample_count,
                train_loss: raw.train_loss,
                compute_nanos: raw.compute_nanos,
            });
        }
        let end = Instant::now();
        Ok(TimedRound {
            uplinks,
            wall_nanos: (end - start).as_nanos() as u64,
            breakdown: PhaseBreakdown {
                dispatch_nanos: (dispatched - start).as_nanos() as u64,
                compute_nanos: (computed - dispatched).as_nanos() as u64,
                collect_nanos: (end - computed).as_nanos() as u64,
            },
        })
    }
}
