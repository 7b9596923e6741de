use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::fedserver::sha256_hex;
use crate::tensornet::ModelSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// `[channels, height, width]`
    pub shape: [usize; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// Directory holding `data_batch_*.bin` and `test_batch.bin`.
    Cifar10 { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSource {
    /// Generated on the fly; `seed` defaults to the experiment's base seed.
    Inline {
        classes_per_client: usize,
        samples_per_client: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    File { path: PathBuf },
}

fn default_eval_batch_size() -> usize {
    1000
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Everything needed to reproduce one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub base_seed: u64,
    pub model: ModelSpec,
    pub dataset: DatasetSource,
    pub partition: PartitionSource,
    pub rounds: u64,
    pub clients_total: usize,
    pub clients_per_round: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
    pub engine: EngineConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config("<config>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Field-level checks, including that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        self.validate_inputs()
    }

    /// Every check of [`validate`](Self::validate) except the round count,
    /// so a zero-round simulation can still be prepared as a library call.
    pub fn validate_inputs(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        if self.clients_total < 1 {
            return Err(Error::config("clients_total", "must be at least 1"));
        }
        if self.clients_per_round < 1 || self.clients_per_round > self.clients_total {
            return Err(Error::config(
                "clients_per_round",
                format!("must lie in [1, clients_total = {}]", self.clients_total),
            ));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be a positive finite number"));
        }
        if self.eval_batch_size < 1 {
            return Err(Error::config("eval_batch_size", "must be at least 1"));
        }
        self.engine
            .validate()
            .map_err(|e| Error::config("engine.parallelism", e.to_string()))?;
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                if s.n_classes != self.model.n_classes {
                    return Err(Error::config(
                        "dataset.synthetic.n_classes",
                        format!("must equal model.n_classes = {}", self.model.n_classes),
                    ));
                }
                if s.shape != self.model.input_shape {
                    return Err(Error::config(
                        "dataset.synthetic.shape",
                        format!("must equal model.input_shape = {:?}", self.model.input_shape),
                    ));
                }
                if s.train_per_class < 1 || s.test_per_class < 1 {
                    return Err(Error::config(
                        "dataset.synthetic",
                        "train_per_class and test_per_class must be at least 1",
                    ));
                }
            }
            DatasetSource::Cifar10 { path } => {
                if !path.is_dir() {
                    return Err(Error::config(
                        "dataset.cifar10.path",
                        format!("{} is not a directory", path.display()),
                    ));
                }
                if self.model.input_shape != [3, 32, 32] || self.model.n_classes != 10 {
                    return Err(Error::config("model", "CIFAR-10 needs input_shape [3, 32, 32] and 10 classes"));
                }
            }
        }
        match &self.partition {
            PartitionSource::Inline {
                classes_per_client,
                samples_per_client,
                ..
            } => {
                if *classes_per_client < 1 || *samples_per_client < 1 {
                    return Err(Error::config(
                        "partition.inline",
                        "classes_per_client and samples_per_client must be at least 1",
                    ));
                }
            }
            PartitionSource::File { path } => {
                if !path.is_file() {
                    return Err(Error::config(
                        "partition.file.path",
                        format!("{} does not exist", path.display()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON (sorted keys, no whitespace) of every field except
    /// `output_dir`, which says where results go rather than what they are.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        serde_json::to_string(&value).expect("value serializes")
    }

    /// SHA-256 hex of [`canonical_json`](Self::canonical_json).
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}
