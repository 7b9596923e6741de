//! Experiment configuration plus the harness behind the `verify`, `sweep`
//! and `diverge` commands.

mod config;
mod harness;
mod report;

pub use config::{DatasetSource, ExperimentConfig, PartitionSource, SyntheticSpec};
pub use harness::{
    compare_transports, diverge, median, sweep, verify, DivergeReport, DivergeRow, SweepRow, TransportComparison,
    VerifyReport,
};
pub use report::{
    diverge_csv, sweep_csv, transport_csv, write_summary, write_text, JsonlObserver, Summary,
};
