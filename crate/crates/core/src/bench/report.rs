use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::harness::{DivergeReport, SweepRow, TransportComparison};
use crate::fedserver::{RoundLog, RoundObserver, SimulationOutcome};
use crate::{Error, Result};

/// Appends one JSON line per finished round and flushes it immediately, so
/// an interrupted run keeps every completed round.
pub struct JsonlObserver {
    path: std::path::PathBuf,
    out: BufWriter<File>,
    strip_timing: bool,
}

impl JsonlObserver {
    pub fn create(path: &Path, strip_timing: bool) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlObserver {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            strip_timing,
        })
    }
}

impl RoundObserver for JsonlObserver {
    fn round_end(&mut self, log: &RoundLog) -> Result<()> {
        let line = if self.strip_timing {
            log.without_timing().to_json_line()
        } else {
            log.to_json_line()
        };
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: u64,
    pub initial_hash: String,
    pub final_hash: String,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub config_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_wall_nanos: Option<u64>,
}

impl Summary {
    pub fn from_outcome(outcome: &SimulationOutcome, fingerprint: &str, strip_timing: bool) -> Summary {
        let last = outcome.logs.last();
        Summary {
            rounds: outcome.logs.len() as u64,
            initial_hash: outcome.initial_hash.clone(),
            final_hash: last.map_or_else(|| outcome.initial_hash.clone(), |l| l.model_hash.clone()),
            final_accuracy: last.map_or(0.0, |l| l.test_accuracy),
            final_loss: last.map_or(0.0, |l| l.test_loss),
            config_fingerprint: fingerprint.to_string(),
            total_wall_nanos: (!strip_timing).then_some(outcome.loop_wall_nanos),
        }
    }
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    write_text(path, &text)
}

/// Columns: `parallelism, wall_nanos, hash_round_1..R, final_accuracy,
/// delta_accuracy_pp, hash_agreement`. Timing is left empty when stripped.
pub fn sweep_csv(rows: &[SweepRow], strip_timing: bool) -> String {
    let rounds = rows.first().map_or(0, |r| r.hashes.len());
    let mut out = String::from("parallelism,wall_nanos");
    for r in 1..=rounds {
        let _ = write!(out, ",hash_round_{r}");
    }
    out.push_str(",final_accuracy,delta_accuracy_pp,hash_agreement\n");
    for row in rows {
        let _ = write!(out, "{},", row.parallelism);
        if !strip_timing {
            let _ = write!(out, "{}", row.wall_nanos);
        }
        for h in &row.hashes {
            let _ = write!(out, ",{h}");
        }
        let _ = writeln!(
            out,
            ",{},{},{}",
            row.final_accuracy, row.delta_accuracy_pp, row.hash_agreement
        );
    }
    out
}

/// One row per repetition and transport, then one `median` row per transport.
pub fn transport_csv(cmp: &TransportComparison) -> String {
    let mut out = String::from("transport,repetition,wall_nanos\n");
    for (name, values) in [("shared_memory", &cmp.shared_nanos), ("serialized_channel", &cmp.serialized_nanos)] {
        for (i, v) in values.iter().enumerate() {
            let _ = writeln!(out, "{name},{i},{v}");
        }
    }
    let _ = writeln!(out, "shared_memory,median,{}", cmp.shared_median);
    let _ = writeln!(out, "serialized_channel,median,{}", cmp.serialized_median);
    out
}

pub fn diverge_csv(report: &DivergeReport) -> String {
    let mut out = String::from("round,run,l2_distance\n");
    for row in &report.rows {
        let _ = writeln!(out, "{},{},{}", row.round, row.run, row.l2_distance);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_csv_layout() {
        let rows = vec![SweepRow {
            parallelism: 2,
            wall_nanos: 17,
            hashes: vec!["aa".into(), "bb".into()],
            final_accuracy: 0.5,
            delta_accuracy_pp: 0.0,
            hash_agreement: true,
        }];
        assert_eq!(
            sweep_csv(&rows, false),
            "parallelism,wall_nanos,hash_round_1,hash_round_2,final_accuracy,delta_accuracy_pp,hash_agreement\n\
             2,17,aa,bb,0.5,0,true\n"
        );
        assert!(sweep_csv(&rows, true).ends_with("2,,aa,bb,0.5,0,true\n"));
    }

    #[test]
    fn jsonl_flushes_each_round() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/rounds.jsonl");
        let mut obs = JsonlObserver::create(&path, true).unwrap();
        let log = RoundLog {
            round: 1,
            model_hash: "ab".into(),
            test_accuracy: 0.25,
            test_loss: 1.5,
            wall_nanos: Some(9),
            config_fingerprint: "ff".into(),
        };
        obs.round_end(&log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"round\":1,\"model_hash\":\"ab\",\"test_accuracy\":0.25,\"test_loss\":1.5,\"config_fingerprint\":\"ff\"}\n"
        );
    }
}
