use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedsim::bench::{
    compare_transports, diverge, diverge_csv, sweep, sweep_csv, transport_csv, verify, write_summary, write_text,
    ExperimentConfig, JsonlObserver, Summary,
};
use fedsim::datahub::{generate_synthetic, load_cifar10_binary, partition_label_skew, save_partition, Dataset};
use fedsim::fedserver::Experiment;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_EXPECTATION: u8 = 4;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Deterministic single-node federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write rounds.jsonl and summary.json.
    Run(RunArgs),
    /// Run a simulation several times and compare per-round model hashes.
    Verify(VerifyArgs),
    /// Run once per parallelism level and tabulate timing and hashes.
    Sweep(SweepArgs),
    /// Track how far one probe sample's logits drift across repeated runs.
    Diverge(DivergeArgs),
    /// Generate a label-skew partition file.
    MakePartition(MakePartitionArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Leave wall-clock fields out of every output file.
    #[arg(long)]
    strip_timing: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum YesNo {
    Yes,
    No,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 2)]
    repeats: usize,
    /// Defaults to `yes` for sampled-order collection and `no` otherwise.
    #[arg(long, value_enum)]
    expect_agreement: Option<YesNo>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    parallelism: Vec<usize>,
    /// Also time shared-memory against serialized transport.
    #[arg(long)]
    compare_transport: bool,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
}

#[derive(Args)]
struct DivergeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    probe_client: usize,
    /// Position within the probe client's sample list.
    #[arg(long, default_value_t = 0)]
    probe_sample: usize,
}

#[derive(Args)]
struct MakePartitionArgs {
    /// Take the dataset from this experiment configuration.
    #[arg(long, conflicts_with_all = ["cifar10", "synthetic_classes"])]
    config: Option<PathBuf>,
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long, conflicts_with = "synthetic_classes")]
    cifar10: Option<PathBuf>,
    #[arg(long, requires = "synthetic_per_class")]
    synthetic_classes: Option<usize>,
    #[arg(long)]
    synthetic_per_class: Option<usize>,
    /// Channels, height and width.
    #[arg(long, value_delimiter = ',', default_value = "3,32,32")]
    synthetic_shape: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    synthetic_seed: u64,
    #[arg(long)]
    clients: usize,
    #[arg(long)]
    classes_per_client: usize,
    #[arg(long)]
    samples_per_client: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait ExitWith<T> {
    fn exit_with(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for Result<T, E> {
    fn exit_with(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Diverge(a) => cmd_diverge(a),
        Command::MakePartition(a) => cmd_make_partition(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn prepare(common: &Common) -> Result<(Experiment, PathBuf), Failure> {
    let config = ExperimentConfig::load(&common.config).exit_with(EXIT_CONFIG)?;
    let out = common.output.clone().unwrap_or_else(|| config.output_dir.clone());
    let experiment = Experiment::prepare(&config).exit_with(EXIT_CONFIG)?;
    Ok((experiment, out))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    write_text(path, text).exit_with(EXIT_RUNTIME)
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let (experiment, out) = prepare(&a.common)?;
    let config = experiment.config();
    write(&out.join("config.json"), &(config.to_json_pretty() + "\n"))?;
    let mut observer = JsonlObserver::create(&out.join("rounds.jsonl"), a.common.strip_timing).exit_with(EXIT_RUNTIME)?;
    let outcome = experiment.run_observed(&mut observer).exit_with(EXIT_RUNTIME)?;
    for log in &outcome.logs {
        println!(
            "round {:>4}  acc {:.4}  loss {:.4}  {}",
            log.round, log.test_accuracy, log.test_loss, log.model_hash
        );
    }
    let summary = Summary::from_outcome(&outcome, &config.fingerprint(), a.common.strip_timing);
    write_summary(&out.join("summary.json"), &summary).exit_with(EXIT_RUNTIME)?;
    println!("final hash {}", summary.final_hash);
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    let (experiment, out) = prepare(&a.common)?;
    let expect = a.expect_agreement.map(|e| matches!(e, YesNo::Yes));
    let report = verify(&experiment, a.repeats, expect).exit_with(if a.repeats < 2 { EXIT_CONFIG } else { EXIT_RUNTIME })?;

    let mut csv = String::from("run");
    for r in 1..=report.round_agreement.len() {
        csv.push_str(&format!(",hash_round_{r}"));
    }
    csv.push_str(",final_accuracy\n");
    for (i, (hashes, acc)) in report.hashes.iter().zip(&report.final_accuracies).enumerate() {
        csv.push_str(&format!("{i},{},{acc}\n", hashes.join(",")));
    }
    write(&out.join("verify.csv"), &csv)?;

    for (r, agree) in report.round_agreement.iter().enumerate() {
        println!("round {:>4}  {}", r + 1, if *agree { "agree" } else { "DIFFER" });
    }
    match report.first_divergent_round {
        Some(r) => println!("first divergent round: {r}"),
        None => println!("all {} runs bitwise identical", a.repeats),
    }
    println!(
        "disagreeing run pairs: {}/{}  final accuracy std: {:.4} pp",
        report.disagreeing_pairs, report.run_pairs, report.accuracy_std_pp
    );
    let wanted = if report.expected_agreement { "agreement" } else { "disagreement" };
    if report.passed {
        println!("verify: PASS (expected {wanted})");
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_EXPECTATION,
            error: anyhow::anyhow!("verify: expected {wanted} across runs"),
        })
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let (experiment, out) = prepare(&a.common)?;
    if a.parallelism.contains(&0) {
        return Err(Failure {
            code: EXIT_CONFIG,
            error: anyhow::anyhow!("--parallelism levels must be at least 1"),
        });
    }
    let rows = sweep(&experiment, &a.parallelism).exit_with(EXIT_RUNTIME)?;
    write(&out.join("sweep.csv"), &sweep_csv(&rows, a.common.strip_timing))?;
    for row in &rows {
        println!(
            "P={:<3} wall {:>8.3} s  acc {:.4}  agree {}",
            row.parallelism,
            row.wall_nanos as f64 * 1e-9,
            row.final_accuracy,
            row.hash_agreement
        );
    }
    if a.compare_transport {
        let cmp = compare_transports(&experiment, a.repetitions).exit_with(EXIT_RUNTIME)?;
        write(&out.join("transport.csv"), &transport_csv(&cmp))?;
        println!(
            "median shared {:.3} s, serialized {:.3} s, ratio {:.3}, hashes match {}",
            cmp.shared_median as f64 * 1e-9,
            cmp.serialized_median as f64 * 1e-9,
            cmp.ratio,
            cmp.hashes_match
        );
    }
    Ok(())
}

fn cmd_diverge(a: DivergeArgs) -> Result<(), Failure> {
    let (experiment, out) = prepare(&a.common)?;
    let report = diverge(&experiment, a.runs, a.probe_client, a.probe_sample).exit_with(EXIT_CONFIG)?;
    write(&out.join("divergence.csv"), &diverge_csv(&report))?;
    for (r, max) in report.max_per_round.iter().enumerate() {
        println!("round {:>4}  max l2 {max:.6e}", r + 1);
    }
    println!("nondecreasing fraction {:.3}", report.nondecreasing_fraction);
    Ok(())
}

fn cmd_make_partition(a: MakePartitionArgs) -> Result<(), Failure> {
    let dataset: Dataset = if let Some(path) = &a.config {
        let config = ExperimentConfig::load(path).exit_with(EXIT_CONFIG)?;
        config_dataset(&config).exit_with(EXIT_CONFIG)?
    } else if let Some(dir) = &a.cifar10 {
        load_cifar10_binary(dir).exit_with(EXIT_CONFIG)?
    } else if let (Some(classes), Some(per_class)) = (a.synthetic_classes, a.synthetic_per_class) {
        let shape: [usize; 3] = a.synthetic_shape.as_slice().try_into().map_err(|_| Failure {
            code: EXIT_CONFIG,
            error: anyhow::anyhow!("--synthetic-shape takes three values, got {}", a.synthetic_shape.len()),
        })?;
        generate_synthetic(classes, per_class, shape, a.synthetic_seed).exit_with(EXIT_CONFIG)?
    } else {
        return Err(Failure {
            code: EXIT_CONFIG,
            error: anyhow::anyhow!("one of --config, --cifar10 or --synthetic-classes is required"),
        });
    };
    let partition = partition_label_skew(&dataset, a.clients, a.classes_per_client, a.samples_per_client, a.seed)
        .exit_with(EXIT_CONFIG)?;
    save_partition(&partition, &a.out).exit_with(EXIT_RUNTIME)?;
    println!("wrote {} (crc32 {:08x})", a.out.display(), partition.crc32());
    for (client, indices) in partition.assignment.iter().enumerate() {
        let mut hist = vec![0usize; dataset.n_classes()];
        for &i in indices {
            hist[dataset.labels()[i]] += 1;
        }
        let classes: Vec<String> = hist
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, n)| format!("{c}:{n}"))
            .collect();
        println!("client {client:>4}  {}", classes.join(" "));
    }
    Ok(())
}

/// The training split an experiment configuration describes.
fn config_dataset(config: &ExperimentConfig) -> anyhow::Result<Dataset> {
    use fedsim::bench::DatasetSource;
    Ok(match &config.dataset {
        DatasetSource::Synthetic(s) => {
            fedsim::datahub::generate_synthetic_split(s.n_classes, s.train_per_class, s.test_per_class, s.shape, s.seed)
                .context("generating the synthetic dataset")?
                .0
        }
        DatasetSource::Cifar10 { path } => load_cifar10_binary(path)?,
    })
}
