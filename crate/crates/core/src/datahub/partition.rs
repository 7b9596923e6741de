//! Label-skew client partitions and their on-disk form.
//!
//! File format: one canonical JSON object (sorted keys, no whitespace)
//! followed by a newline:
//!
//! ```text
//! {"assignment":[[...],...],"base_seed":42,"classes_per_client":2,"crc32":...,"n_clients":10,"version":1}
//! ```
//!
//! `crc32` is the IEEE CRC-32 of the same object serialized without the
//! `crc32` key.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::rngkit::{RngStream, SeedDomain};
use crate::{Error, Result};

pub const PARTITION_FORMAT_VERSION: u64 = 1;

/// Immutable client-to-sample mapping. Client `i` owns `assignment[i]`,
/// sorted ascending; lists are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub base_seed: u64,
    pub n_clients: usize,
    pub classes_per_client: usize,
    pub assignment: Vec<Vec<usize>>,
}

impl Partition {
    pub fn client(&self, client_id: usize) -> &[usize] {
        &self.assignment[client_id]
    }

    /// Structural invariants: one list per client, each sorted strictly
    /// ascending, no index shared between clients, every index below
    /// `dataset_len` when given.
    pub fn validate(&self, dataset_len: Option<usize>) -> Result<()> {
        if self.assignment.len() != self.n_clients {
            return Err(Error::format(format!(
                "n_clients is {} but {} client lists are present",
                self.n_clients,
                self.assignment.len()
            )));
        }
        let mut seen = HashSet::new();
        for (client, list) in self.assignment.iter().enumerate() {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::format(format!("client {client} index list is not strictly ascending")));
            }
            for &i in list {
                if dataset_len.is_some_and(|n| i >= n) {
                    return Err(Error::format(format!("client {client} references sample {i} beyond the dataset")));
                }
                if !seen.insert(i) {
                    return Err(Error::format(format!("sample {i} assigned to more than one client")));
                }
            }
        }
        Ok(())
    }

    fn body(&self) -> Body<'_> {
        Body {
            assignment: &self.assignment,
            base_seed: self.base_seed,
            classes_per_client: self.classes_per_client,
            n_clients: self.n_clients,
            version: PARTITION_FORMAT_VERSION,
        }
    }

    pub fn crc32(&self) -> u32 {
        let body = serde_json::to_vec(&self.body()).expect("partition body serializes");
        crc32fast::hash(&body)
    }

    /// Exact file contents.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let record = Record {
            assignment: self.assignment.clone(),
            base_seed: self.base_seed,
            classes_per_client: self.classes_per_client,
            crc32: self.crc32(),
            n_clients: self.n_clients,
            version: PARTITION_FORMAT_VERSION,
        };
        let mut bytes = serde_json::to_vec(&record).expect("partition record serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Partition> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| Error::format(format!("partition file is not valid JSON: {e}")))?;
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format("partition file lacks an integer `version`"))?;
        if version != PARTITION_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: PARTITION_FORMAT_VERSION,
            });
        }
        let record: Record =
            serde_json::from_value(value).map_err(|e| Error::format(format!("malformed partition file: {e}")))?;
        let partition = Partition {
            base_seed: record.base_seed,
            n_clients: record.n_clients,
            classes_per_client: record.classes_per_client,
            assignment: record.assignment,
        };
        let computed = partition.crc32();
        if computed != record.crc32 {
            return Err(Error::Checksum {
                recorded: record.crc32,
                computed,
            });
        }
        partition.validate(None)?;
        Ok(partition)
    }
}

// Field order is alphabetical so serde emits sorted keys.
#[derive(Serialize)]
struct Body<'a> {
    assignment: &'a [Vec<usize>],
    base_seed: u64,
    classes_per_client: usize,
    n_clients: usize,
    version: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    assignment: Vec<Vec<usize>>,
    base_seed: u64,
    classes_per_client: usize,
    crc32: u32,
    n_clients: usize,
    version: u64,
}

pub fn save_partition(partition: &Partition, path: &Path) -> Result<()> {
    std::fs::write(path, partition.to_canonical_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_partition(path: &Path) -> Result<Partition> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Partition::from_bytes(&bytes)
}

/// Shard-based label skew: every client receives `samples_per_client`
/// samples drawn from exactly `classes_per_client` labels.
///
/// Each class's samples (ascending index) are cut into shards of
/// `samples_per_client / classes_per_client`; shards never straddle two
/// labels. A balanced number of shards per class is selected, with at most
/// `n_clients` from any one class, and laid out class-major. Client slot `r`
/// takes shards `r, r + n, r + 2n, ...`, so its shards come from distinct
/// classes. Randomness comes from one stream seeded by
/// `derive_seed(seed, ClientSampling, 0, 0)`: a shuffle of each class's shard
/// list (ascending class order), then a shuffle mapping slots to client ids.
pub fn partition_label_skew(
    dataset: &Dataset,
    n_clients: usize,
    classes_per_client: usize,
    samples_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    let n_classes = dataset.n_classes();
    if n_clients == 0 || classes_per_client == 0 || samples_per_client == 0 {
        return Err(Error::invalid(
            "n_clients, classes_per_client and samples_per_client must all be positive",
        ));
    }
    if classes_per_client > n_classes {
        return Err(Error::invalid(format!(
            "classes_per_client ({classes_per_client}) exceeds the dataset's {n_classes} classes"
        )));
    }
    if !samples_per_client.is_multiple_of(classes_per_client) {
        return Err(Error::invalid(format!(
            "samples_per_client ({samples_per_client}) must be a multiple of classes_per_client ({classes_per_client})"
        )));
    }
    let needed = n_clients * samples_per_client;
    if needed > dataset.len() {
        return Err(Error::invalid(format!(
            "n_clients * samples_per_client = {needed} exceeds the {} available samples",
            dataset.len()
        )));
    }
    let shard_size = samples_per_client / classes_per_client;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &label) in dataset.labels().iter().enumerate() {
        by_class[label].push(i);
    }
    let capacity: Vec<usize> = by_class.iter().map(|s| (s.len() / shard_size).min(n_clients)).collect();
    let total_shards = n_clients * classes_per_client;
    let usable: usize = capacity.iter().sum();
    if usable < total_shards {
        return Err(Error::invalid(format!(
            "per-class supply allows only {usable} shards of {shard_size} samples \
             (at most {n_clients} per class), but {total_shards} are needed"
        )));
    }

    // Balanced fill: one shard per class per pass until enough are taken.
    let mut take = vec![0usize; n_classes];
    let mut remaining = total_shards;
    while remaining > 0 {
        for class in 0..n_classes {
            if remaining > 0 && take[class] < capacity[class] {
                take[class] += 1;
                remaining -= 1;
            }
        }
    }

    let mut stream = RngStream::derived(seed, SeedDomain::ClientSampling, 0, 0);
    let mut layout: Vec<&[usize]> = Vec::with_capacity(total_shards);
    for (class, samples) in by_class.iter().enumerate() {
        let mut shard_ids: Vec<usize> = (0..samples.len() / shard_size).collect();
        stream.shuffle(&mut shard_ids);
        for &s in &shard_ids[..take[class]] {
            layout.push(&samples[s * shard_size..(s + 1) * shard_size]);
        }
    }
    let mut slot_to_client: Vec<usize> = (0..n_clients).collect();
    stream.shuffle(&mut slot_to_client);

    let mut assignment = vec![Vec::with_capacity(samples_per_client); n_clients];
    for (slot, &client) in slot_to_client.iter().enumerate() {
        for t in 0..classes_per_client {
            assignment[client].extend_from_slice(layout[slot + t * n_clients]);
        }
        assignment[client].sort_unstable();
    }
    Ok(Partition {
        base_seed: seed,
        n_clients,
        classes_per_client,
        assignment,
    })
}
