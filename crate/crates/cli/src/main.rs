mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chimera_core::data::{empirical_confusion, write_dataset, ClassPartition, NoisyDataset};
use chimera_core::detector::{infer_partition, Recording};
use chimera_core::metrics::{ensemble_proba, MetricsReport};
use chimera_core::pipeline::{Pipeline, RunState, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::output::{DirLock, MetricsSink};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("CHIMERA_GIT_REV"));
const THREADS_VAR: &str = "CHIMERA_THREADS";

#[derive(Parser)]
#[command(name = "chimera", version = VERSION, about = "Noisy-label training experiments on synthetic and file-backed data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the (noisy) training set and test set and write them out.
    Generate(SourceArgs),
    /// Full two-stage training run.
    Run(RunArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Infer the class-subset partition from a checkpoint's predictions.
    InferPartition(PartitionArgs),
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// Reference set for kNN and the detector; defaults to DATASET.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Experiment config supplying detector and evaluation settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    alignment_pairs: Option<usize>,
}

#[derive(Args)]
struct PartitionArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long, default_value_t = 3)]
    max_size: usize,
    #[arg(long, value_enum, default_value_t = RecordingArg::EveryK)]
    recording: RecordingArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RecordingArg {
    EveryK,
    FirstK,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn config_err(self) -> Outcome<T>;
    fn runtime_err(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config_err(self) -> Outcome<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn runtime_err(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = threads().and_then(|_| match cli.command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::InferPartition(a) => partition(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

/// Training is single-threaded so runs stay bit-reproducible; the variable is
/// validated and recorded but larger values do not change the computation.
fn threads() -> Outcome<usize> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(1);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| anyhow!("{THREADS_VAR} must be a positive integer, got {raw:?}"))
        .config_err()?;
    if n > 1 {
        log::warn!("{THREADS_VAR}={n}: training runs on one thread to keep results bit-exact");
    }
    Ok(n)
}

struct Prepared {
    cfg: ExperimentConfig,
    hash: String,
    run_id: String,
    out: PathBuf,
    train: NoisyDataset,
    test: Option<NoisyDataset>,
}

fn prepare(a: &SourceArgs) -> Outcome<Prepared> {
    let mut cfg = config::load(&a.config).config_err()?;
    if let Some(s) = a.seed {
        cfg.reseed(s);
    }
    if let Some(o) = &a.out {
        cfg.output.dir = o.clone();
    }
    let (train, test) = cfg.datasets().config_err()?;
    Pipeline::new(&train, test.as_ref(), &cfg.train)
        .context("train")
        .config_err()?;
    // the output location does not change what is computed
    let mut hashed = cfg.clone();
    hashed.output.dir = PathBuf::new();
    let hash = hashed.hash();
    let run_id = format!("{}-s{}", &hash[..12], cfg.train.seed);
    let out = cfg.output.dir.clone();
    Ok(Prepared {
        cfg,
        hash,
        run_id,
        out,
        train,
        test,
    })
}

fn write_data(path: &Path, ds: &NoisyDataset) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    output::write_atomic(path, &buf)
}

#[derive(Serialize)]
struct DatasetSummary {
    num_classes: usize,
    samples: usize,
    test_samples: Option<usize>,
    noise_rate: f64,
    confusion: Vec<Vec<f64>>,
    /// Every class is still the most common observed label among its own samples.
    feasible: bool,
}

fn generate(a: SourceArgs) -> Outcome<()> {
    let p = prepare(&a)?;
    let _lock = DirLock::acquire(&p.out).runtime_err()?;
    write_data(&p.out.join(output::TRAIN_DATA), &p.train).runtime_err()?;
    if let Some(t) = &p.test {
        write_data(&p.out.join(output::TEST_DATA), t).runtime_err()?;
    }
    let conf = empirical_confusion(&p.train).runtime_err()?;
    let summary = DatasetSummary {
        num_classes: p.train.num_classes,
        samples: p.train.len(),
        test_samples: p.test.as_ref().map(|t| t.len()),
        noise_rate: p.train.noise_rate(),
        confusion: conf.normalized(),
        feasible: conf.is_feasible(),
    };
    println!("{}", serde_json::to_string_pretty(&summary).runtime_err()?);
    Ok(())
}

#[derive(Deserialize)]
struct Checkpoint {
    config_hash: String,
    state: RunState,
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    run_id: &'a str,
    config_hash: &'a str,
    state: &'a RunState,
}

#[derive(Serialize)]
struct OutputRecord<'a> {
    run_id: &'a str,
    config_hash: &'a str,
    version: &'a str,
    threads: usize,
    summary: &'a MetricsReport,
    history: &'a [MetricsReport],
}

fn read_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
}

fn run(a: RunArgs) -> Outcome<()> {
    let threads = threads()?;
    let p = prepare(&a.source)?;
    let state = match &a.resume {
        Some(path) => {
            let cp = read_checkpoint(path).config_err()?;
            if cp.config_hash != p.hash {
                return Err(Failure::Config(anyhow!(
                    "checkpoint {} was written by a different config (hash {} vs {})",
                    path.display(),
                    cp.config_hash,
                    p.hash
                )));
            }
            cp.state
        }
        None => RunState::init(&p.train, &p.cfg.train).runtime_err()?,
    };
    let _lock = DirLock::acquire(&p.out).runtime_err()?;
    let cfg_json = serde_json::to_string_pretty(&p.cfg).runtime_err()?;
    output::write_atomic(&p.out.join(output::CONFIG_COPY), cfg_json.as_bytes()).runtime_err()?;
    write_data(&p.out.join(output::TRAIN_DATA), &p.train).runtime_err()?;
    if let Some(t) = &p.test {
        write_data(&p.out.join(output::TEST_DATA), t).runtime_err()?;
    }
    let o = &p.cfg.output;
    let mut sink = MetricsSink::create(&p.out, &p.run_id, o.csv, o.jsonl, &state.history).runtime_err()?;
    let pipeline = Pipeline::new(&p.train, p.test.as_ref(), &p.cfg.train).config_err()?;
    let checkpoint_path = p.out.join(output::CHECKPOINT);
    let finished = pipeline
        .resume(state, |s, r| {
            let cp = CheckpointRef {
                run_id: &p.run_id,
                config_hash: &p.hash,
                state: s,
            };
            let json = serde_json::to_vec(&cp)?;
            output::write_atomic(&checkpoint_path, &json)
                .map_err(|e| chimera_core::Error::Io(std::io::Error::other(e)))?;
            sink.push(r)
                .map_err(|e| chimera_core::Error::Io(std::io::Error::other(e)))?;
            log::info!(
                "{} epoch {}: test accuracy {}",
                r.stage,
                r.epoch,
                r.test_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
            );
            Ok(())
        })
        .runtime_err()?;
    let last = finished
        .history
        .last()
        .ok_or_else(|| anyhow!("run produced no records"))
        .runtime_err()?;
    let record = OutputRecord {
        run_id: &p.run_id,
        config_hash: &p.hash,
        version: VERSION,
        threads,
        summary: last,
        history: &finished.history,
    };
    let json = serde_json::to_string_pretty(&record).runtime_err()?;
    output::write_atomic(&p.out.join(output::SUMMARY), json.as_bytes()).runtime_err()?;
    println!("{}", serde_json::to_string_pretty(last).runtime_err()?);
    Ok(())
}

fn load_eval_inputs(checkpoint: &Path, dataset: &Path) -> Outcome<(RunState, NoisyDataset)> {
    let cp = read_checkpoint(checkpoint).config_err()?;
    let ds = config::read_file(dataset).config_err()?;
    Ok((cp.state, ds))
}

fn eval(a: EvalArgs) -> Outcome<()> {
    let (state, test) = load_eval_inputs(&a.checkpoint, &a.dataset)?;
    let train = match &a.train {
        Some(p) => config::read_file(p).config_err()?,
        None => test.clone(),
    };
    let mut cfg = match &a.config {
        Some(p) => config::load(p).config_err()?.train,
        None => TrainConfig::default(),
    };
    if let Some(k) = a.knn_k {
        cfg.eval.knn_k = k;
    }
    if let Some(n) = a.alignment_pairs {
        cfg.eval.alignment_pairs = n;
    }
    cfg.validate().config_err()?;
    let arch = cfg.architecture_for(&train).config_err()?;
    for net in &state.nets {
        net.check_arch(&arch).runtime_err()?;
    }
    let pipeline = Pipeline::new(&train, Some(&test), &cfg).config_err()?;
    let report = pipeline.final_report(&state).runtime_err()?;
    println!("{}", serde_json::to_string_pretty(&report).runtime_err()?);
    Ok(())
}

#[derive(Serialize)]
struct PartitionReport {
    partition: ClassPartition,
    /// No candidate reached the threshold and every class ended in one subset.
    single_subset: bool,
    singletons: bool,
    true_partition: Option<ClassPartition>,
    exact_match: Option<bool>,
}

fn partition(a: PartitionArgs) -> Outcome<()> {
    let (state, ds) = load_eval_inputs(&a.checkpoint, &a.dataset)?;
    for net in &state.nets {
        if net.arch().input_dim != ds.dim() || net.arch().num_classes != ds.num_classes {
            return Err(Failure::Runtime(anyhow!(
                "checkpoint expects {} features and {} classes, dataset has {} and {}",
                net.arch().input_dim,
                net.arch().num_classes,
                ds.dim(),
                ds.num_classes
            )));
        }
    }
    let recording = match a.recording {
        RecordingArg::EveryK => Recording::EveryK,
        RecordingArg::FirstK => Recording::FirstK,
    };
    let probs = ensemble_proba(&state.net_refs(), &ds.features()).runtime_err()?;
    let part = infer_partition(&probs, a.threshold, a.max_size, recording).config_err()?;
    let truth = ds.noise.partition.clone();
    let report = PartitionReport {
        single_subset: part.subsets.len() == 1 && ds.num_classes > 1,
        singletons: part.subsets.iter().all(|s| s.len() == 1),
        exact_match: truth.as_ref().map(|t| t.same_as(&part)),
        true_partition: truth,
        partition: part,
    };
    if report.single_subset {
        log::warn!("no class subset reached the threshold; all classes fell into one subset");
    }
    println!("{}", serde_json::to_string_pretty(&report).runtime_err()?);
    Ok(())
}
