//! The `efftt` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    derive_seed, gen_synthetic, normalize_dense, read_csv, train_test_split, write_csv, Dataset, DatasetSpec,
    ZipfSampler,
};
use crate::error::Error;
use crate::lookup::{forward_batch, IndexBag, OpCounters};
use crate::model::{save_checkpoint, DlrmModel, LossKind, ModelConfig, StepOutput};
use crate::pipeline::{run_pipeline, run_sequential, schedule_batches, PipelineConfig};
use crate::reorder::{apply_bijection, learn_bijection, mean_distinct_prefixes};
use crate::scalar::Scalar;
use crate::tt::{factorize_dims, param_stats, TtShape, TtTable};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(Error::InvalidArgument(_) | Error::InvalidShape(_) | Error::UnsupportedCores(_)) => EXIT_USAGE,
            CliError::Core(Error::NonFinite(_)) => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "efftt", version, about = "TT-compressed embedding tables: data, training, reordering and lookup benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Output file or directory, depending on the command.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as CSV.
    GenData(GenDataArgs),
    /// Train the classifier; writes metrics.jsonl and checkpoint.bin.
    Train(TrainArgs),
    /// Learn an index bijection for one sparse field.
    Reorder(ReorderArgs),
    /// Count slice products with and without the reuse buffer.
    BenchLookup(BenchArgs),
    /// Summarize a metrics stream.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = crate::data::DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 6)]
    pub dense: usize,
    /// Rows per sparse field, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [100_000usize, 50_000, 20_000, 10_000, 5_000, 500, 64])]
    pub rows: Vec<usize>,
    #[arg(long, default_value_t = 1.05)]
    pub zipf: f64,
    #[arg(long, default_value_t = crate::data::DEFAULT_POSITIVES as f64 / crate::data::DEFAULT_SAMPLES as f64)]
    pub attack_fraction: f64,
    /// Planted co-occurrence clusters (0 = none).
    #[arg(long, default_value_t = 0)]
    pub clusters: usize,
}

/// Training flags. Every option can also come from `--config`; flags win.
#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// key=value file with the same keys as the long flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides epochs when given.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Number of TT cores (2 or 3).
    #[arg(long)]
    pub cores: Option<usize>,
    /// Fields with fewer rows stay uncompressed; use a huge value for an all-dense model.
    #[arg(long)]
    pub tt_min_rows: Option<usize>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long, value_enum)]
    pub reuse: Option<Switch>,
    #[arg(long, value_enum)]
    pub reorder: Option<Switch>,
    #[arg(long)]
    pub hot_ratio: Option<f64>,
    #[arg(long)]
    pub pipeline: bool,
    #[arg(long)]
    pub lc: Option<usize>,
    #[arg(long, value_enum)]
    pub cache_sync: Option<Switch>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub init_std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReorderArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub field: usize,
    #[arg(long, default_value_t = 0.01)]
    pub hot_ratio: f64,
    /// Samples per batch; batches follow file order.
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 8)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub cores: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Explicit row factors; otherwise derived from --rows.
    #[arg(long, value_delimiter = ',')]
    pub m: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long, default_value_t = 100_000)]
    pub rows: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    /// One explicit bag, comma separated; replaces the generated batches.
    #[arg(long, value_delimiter = ',')]
    pub indices: Option<Vec<usize>>,
    #[arg(long, default_value_t = 20)]
    pub batches: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1.05)]
    pub zipf: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics stream written by `train`.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Optional output file; the summary is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub f1: f64,
    pub slice_mults: u64,
    pub buffer_hits: u64,
    pub buffer_misses: u64,
    pub samples_per_sec: f64,
}

/// Fully resolved training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub precision: Precision,
    pub epochs: usize,
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub embed_dim: usize,
    pub rank: usize,
    pub cores: usize,
    pub tt_min_rows: usize,
    pub loss: LossKind,
    pub reuse: bool,
    pub reorder: bool,
    pub hot_ratio: f64,
    pub pipeline: bool,
    pub lc: usize,
    pub cache_sync: bool,
    pub log_every: usize,
    pub init_std: f64,
}

const CONFIG_KEYS: &[&str] = &[
    "seed", "precision", "out", "data", "epochs", "steps", "batch_size", "lr", "momentum", "embed_dim", "rank",
    "cores", "tt_min_rows", "loss", "reuse", "reorder", "hot_ratio", "pipeline", "lc", "cache_sync", "log_every",
    "init_std",
];

/// Parses `key=value` lines; `#` starts a comment. Dashes in keys are read as underscores.
pub fn parse_config_file(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        let key = k.trim().replace('-', "_");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("config line {}: unknown key `{}`", n + 1, k.trim())));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> CliResult<V> {
    v.parse().map_err(|_| CliError::Usage(format!("bad value `{v}` for `{key}`")))
}

fn parse_switch(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!("bad value `{v}` for `{key}` (expected on/off)"))),
    }
}

fn parse_loss(v: &str) -> CliResult<LossKind> {
    match v {
        "bce" => Ok(LossKind::Bce),
        "mse" => Ok(LossKind::Mse),
        _ => Err(CliError::Usage(format!("unknown loss `{v}` (expected bce or mse)"))),
    }
}

impl TrainArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(p) => parse_config_file(&std::fs::read_to_string(p).map_err(Error::from)?)?,
            None => BTreeMap::new(),
        };
        let get = |k: &str| file.get(k).map(String::as_str);
        macro_rules! pick {
            ($flag:expr, $key:literal, $default:expr) => {
                match ($flag, get($key)) {
                    (Some(v), _) => v,
                    (None, Some(s)) => parse_value($key, s)?,
                    (None, None) => $default,
                }
            };
        }
        let switch = |flag: Option<Switch>, key: &str, default: bool| -> CliResult<bool> {
            match (flag, get(key)) {
                (Some(s), _) => Ok(s.on()),
                (None, Some(v)) => parse_switch(key, v),
                (None, None) => Ok(default),
            }
        };
        let precision = match (self.precision, get("precision")) {
            (Some(p), _) => p,
            (None, Some("f32")) => Precision::F32,
            (None, Some("f64")) => Precision::F64,
            (None, Some(v)) => return Err(CliError::Usage(format!("bad precision `{v}`"))),
            (None, None) => Precision::F32,
        };
        let loss = match (&self.loss, get("loss")) {
            (Some(v), _) => parse_loss(v)?,
            (None, Some(v)) => parse_loss(v)?,
            (None, None) => LossKind::Bce,
        };
        let data: PathBuf = match (&self.data, get("data")) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => PathBuf::from(p),
            (None, None) => return Err(CliError::Usage("--data is required".into())),
        };
        let out: PathBuf = match (&self.out, get("out")) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => PathBuf::from(p),
            (None, None) => return Err(CliError::Usage("--out is required".into())),
        };
        let steps = match (self.steps, get("steps")) {
            (Some(v), _) => Some(v),
            (None, Some(s)) => Some(parse_value("steps", s)?),
            (None, None) => None,
        };
        let cfg = RunConfig {
            data,
            out,
            seed: pick!(self.seed, "seed", 0),
            precision,
            epochs: pick!(self.epochs, "epochs", 24),
            steps,
            batch_size: pick!(self.batch_size, "batch_size", 256),
            lr: pick!(self.lr, "lr", 0.05),
            momentum: pick!(self.momentum, "momentum", 0.9),
            embed_dim: pick!(self.embed_dim, "embed_dim", 8),
            rank: pick!(self.rank, "rank", 8),
            cores: pick!(self.cores, "cores", 3),
            tt_min_rows: pick!(self.tt_min_rows, "tt_min_rows", 1000),
            loss,
            reuse: switch(self.reuse, "reuse", true)?,
            reorder: switch(self.reorder, "reorder", false)?,
            hot_ratio: pick!(self.hot_ratio, "hot_ratio", 0.01),
            pipeline: self.pipeline || get("pipeline").map(|v| parse_switch("pipeline", v)).transpose()?.unwrap_or(false),
            lc: pick!(self.lc, "lc", 1),
            cache_sync: switch(self.cache_sync, "cache_sync", true)?,
            log_every: pick!(self.log_every, "log_every", 50),
            init_std: pick!(self.init_std, "init_std", 0.02),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.batch_size == 0 || self.log_every == 0 || self.lc == 0 {
            return bad("batch_size, log_every and lc must be positive".into());
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return bad("nothing to train: zero steps".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("lr {} / momentum {} out of range", self.lr, self.momentum));
        }
        if !(self.hot_ratio > 0.0 && self.hot_ratio < 1.0) {
            return bad(format!("hot_ratio {} not in (0, 1)", self.hot_ratio));
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => {
            let cfg = a.resolve()?;
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&cfg),
                Precision::F64 => cmd_train::<f64>(&cfg),
            }
        }
        Command::Reorder(a) => cmd_reorder(&a),
        Command::BenchLookup(a) => match a.common.precision {
            Precision::F32 => cmd_bench_lookup::<f32>(&a),
            Precision::F64 => cmd_bench_lookup::<f64>(&a),
        },
        Command::Report(a) => cmd_report(&a),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_gen_data(a: &GenDataArgs) -> CliResult<()> {
    let spec = DatasetSpec {
        n_samples: a.samples,
        n_dense: a.dense,
        n_sparse: a.rows.len(),
        rows_per_field: a.rows.clone(),
        zipf_s: a.zipf,
        attack_fraction: a.attack_fraction,
        seed: a.common.seed,
        clusters: a.clusters,
    };
    spec.validate()?;
    let ds = gen_synthetic(&spec)?;
    write_csv(&ds, &a.common.out)?;
    println!(
        "{}",
        serde_json::json!({
            "samples": ds.len(),
            "positives": ds.positives(),
            "negatives": ds.len() - ds.positives(),
            "out": a.common.out,
        })
    );
    Ok(())
}

fn write_json_lines<S: Serialize>(path: &Path, records: &[S]) -> CliResult<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn interval_record(phase: &str, step: usize, steps: &[StepOutput], samples_per_sec: f64) -> MetricsRecord {
    let n = steps.len().max(1) as f64;
    let mut c = OpCounters::default();
    for s in steps {
        c += s.counters;
    }
    let mean = |f: fn(&StepOutput) -> f64| steps.iter().map(f).sum::<f64>() / n;
    MetricsRecord {
        phase: phase.into(),
        step,
        loss: mean(|s| s.metrics.loss),
        accuracy: mean(|s| s.metrics.accuracy),
        recall: mean(|s| s.metrics.recall),
        f1: mean(|s| s.metrics.f1),
        slice_mults: c.slice_mults,
        buffer_hits: c.buffer_hits,
        buffer_misses: c.buffer_misses,
        samples_per_sec,
    }
}

/// Relabels every TT field of `dataset` with a bijection learned on the
/// training samples in file order. Returns the bijections by field.
fn reorder_fields(
    dataset: &mut Dataset,
    model_cfg: &ModelConfig,
    train: &[usize],
    batch_size: usize,
    hot_ratio: f64,
) -> CliResult<Vec<(usize, crate::reorder::IndexBijection)>> {
    let batches: Vec<Vec<usize>> = train.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let mut out = Vec::new();
    for f in 0..dataset.n_sparse() {
        if !model_cfg.uses_tt(f) {
            continue;
        }
        let field_batches = dataset.field_batches(&batches, f);
        let r = learn_bijection(&field_batches, dataset.rows_per_field[f], hot_ratio)?;
        for s in &mut dataset.samples {
            for i in &mut s.sparse[f] {
                *i = r.bijection.forward[*i];
            }
        }
        out.push((f, r.bijection));
    }
    Ok(out)
}

fn cmd_train<T: Scalar>(cfg: &RunConfig) -> CliResult<()> {
    let raw = read_csv(&cfg.data)?;
    if raw.is_empty() {
        return Err(Error::Empty("dataset").into());
    }
    std::fs::create_dir_all(&cfg.out).map_err(Error::from)?;
    let (mut dataset, stats) = normalize_dense(&raw);
    stats.write(cfg.out.join("stats.txt"))?;
    let (train, test) = train_test_split(dataset.len());
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Usage("dataset too small for a train/test split".into()));
    }

    let model_cfg = ModelConfig {
        embed_dim: cfg.embed_dim,
        tt_rank: cfg.rank,
        tt_cores: cfg.cores,
        tt_min_rows: cfg.tt_min_rows,
        loss: cfg.loss,
        seed: cfg.seed,
        init_std: cfg.init_std,
        ..ModelConfig::new(dataset.n_dense, dataset.rows_per_field.clone())
    };
    if cfg.reorder {
        for (f, b) in reorder_fields(&mut dataset, &model_cfg, &train, cfg.batch_size, cfg.hot_ratio)? {
            b.save(cfg.out.join(format!("bijection_{f}.txt")))?;
        }
    }
    let model = DlrmModel::<T>::new(model_cfg)?;
    let steps = cfg.steps.unwrap_or(cfg.epochs * train.len().div_ceil(cfg.batch_size));
    let batches: Vec<Vec<usize>> = schedule_batches(train.len(), cfg.batch_size, steps, derive_seed(cfg.seed, 7))?
        .into_iter()
        .map(|b| b.into_iter().map(|k| train[k]).collect())
        .collect();
    let pcfg = PipelineConfig {
        lc: cfg.lc,
        cache_sync: cfg.cache_sync,
        lr: cfg.lr,
        momentum: cfg.momentum,
        reuse: cfg.reuse,
    };

    let start = Instant::now();
    let (trained, step_outputs) = if cfg.pipeline {
        let out = run_pipeline(&model, &dataset, &batches, &pcfg)?;
        std::fs::write(cfg.out.join("events.log"), out.event_log()).map_err(Error::from)?;
        (out.model, out.steps)
    } else {
        let out = run_sequential(&model, &dataset, &batches, &pcfg)?;
        (out.model, out.steps)
    };
    let elapsed = start.elapsed().as_secs_f64().max(1e-9);
    let sps = batches.iter().map(Vec::len).sum::<usize>() as f64 / elapsed;

    let mut records: Vec<MetricsRecord> = step_outputs
        .chunks(cfg.log_every)
        .enumerate()
        .map(|(k, chunk)| interval_record("train", (k * cfg.log_every + chunk.len()).min(steps), chunk, sps))
        .collect();
    let eval = trained.evaluate(&dataset, &test, 1024)?;
    if !eval.loss.is_finite() {
        return Err(Error::NonFinite(format!("test loss after step {steps}")).into());
    }
    let total: Vec<StepOutput> = step_outputs.clone();
    let mut test_rec = interval_record("test", steps, &total, sps);
    test_rec.loss = eval.loss;
    test_rec.accuracy = eval.accuracy;
    test_rec.recall = eval.recall;
    test_rec.f1 = eval.f1;
    records.push(test_rec.clone());
    write_json_lines(&cfg.out.join("metrics.jsonl"), &records)?;
    save_checkpoint(&trained, cfg.out.join("checkpoint.bin"))?;
    let compression = trained
        .tables()
        .iter()
        .map(|t| t.rows() * cfg.embed_dim)
        .sum::<usize>() as f64
        / trained.tables().iter().map(|t| t.param_count()).sum::<usize>().max(1) as f64;
    println!(
        "{}",
        serde_json::json!({
            "steps": steps,
            "test_f1": eval.f1,
            "test_accuracy": eval.accuracy,
            "test_recall": eval.recall,
            "test_loss": eval.loss,
            "embedding_compression": compression,
        })
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReorderReport {
    pub field: usize,
    pub table_len: usize,
    pub hot_threshold: usize,
    pub modularity: f64,
    pub communities: usize,
    /// Communities with more than one member.
    pub clusters: usize,
    pub mean_prefixes_before: f64,
    pub mean_prefixes_after: f64,
    pub fixed_points: usize,
}

fn cmd_reorder(a: &ReorderArgs) -> CliResult<()> {
    let ds = read_csv(&a.data)?;
    if a.field >= ds.n_sparse() {
        return Err(CliError::Usage(format!("field {} but the dataset has {} sparse fields", a.field, ds.n_sparse())));
    }
    if a.batch_size == 0 {
        return Err(CliError::Usage("batch size must be positive".into()));
    }
    let rows = ds.rows_per_field[a.field];
    let sample_batches: Vec<Vec<usize>> = (0..ds.len()).collect::<Vec<_>>().chunks(a.batch_size).map(<[usize]>::to_vec).collect();
    let batches = ds.field_batches(&sample_batches, a.field);
    let r = learn_bijection(&batches, rows, a.hot_ratio)?;
    let shape = factorize_dims(rows, a.embed_dim, a.cores)?.into_shape(1)?;
    let (before, after) = if shape.d() == 3 {
        let relabeled = apply_bijection(&r.bijection, &batches)?;
        (mean_distinct_prefixes(&batches, &shape)?, mean_distinct_prefixes(&relabeled, &shape)?)
    } else {
        (0.0, 0.0)
    };
    std::fs::create_dir_all(&a.common.out).map_err(Error::from)?;
    r.bijection.save(a.common.out.join("bijection.txt"))?;
    let report = ReorderReport {
        field: a.field,
        table_len: rows,
        hot_threshold: r.threshold,
        modularity: r.assignment.q,
        communities: r.assignment.communities(),
        clusters: r.clusters(),
        mean_prefixes_before: before,
        mean_prefixes_after: after,
        fixed_points: r.bijection.fixed_points(),
    };
    let text = serde_json::to_string(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(a.common.out.join("report.json"), format!("{text}\n")).map_err(Error::from)?;
    println!("{text}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub m: Vec<usize>,
    pub n: Vec<usize>,
    pub batches: usize,
    pub indices: usize,
    pub slice_mults_reuse: u64,
    pub slice_mults_plain: u64,
    pub count_ratio: f64,
    pub buffer_hits: u64,
    pub buffer_misses: u64,
    pub hit_rate: f64,
    pub max_abs_diff: f64,
    pub wall_ms_reuse: f64,
    pub wall_ms_plain: f64,
}

fn cmd_bench_lookup<T: Scalar>(a: &BenchArgs) -> CliResult<()> {
    let shape = match (&a.m, &a.n) {
        (Some(m), Some(n)) => TtShape::with_rank(m.clone(), n.clone(), a.rank)?,
        (Some(m), None) => {
            let n = factorize_dims(m.iter().product(), a.dim, m.len())?.n;
            TtShape::with_rank(m.clone(), n, a.rank)?
        }
        (None, Some(_)) => return Err(CliError::Usage("--n requires --m".into())),
        (None, None) => factorize_dims(a.rows, a.dim, 3)?.into_shape(a.rank)?,
    };
    if shape.d() != 3 {
        return Err(CliError::Usage("the reuse buffer needs a three-core shape".into()));
    }
    let table = TtTable::<T>::init_random(shape.clone(), derive_seed(a.common.seed, 1), 0.1)?;
    let batches: Vec<Vec<IndexBag>> = match &a.indices {
        Some(idx) => vec![vec![IndexBag::new(idx.clone())?]],
        None => {
            let zipf = ZipfSampler::new(shape.rows(), a.zipf)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.common.seed, 2));
            (0..a.batches)
                .map(|_| {
                    (0..a.batch_size)
                        .map(|_| {
                            let len = rng.random_range(1..=3);
                            IndexBag::new((0..len).map(|_| zipf.sample(&mut rng)).collect())
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<_, _>>()?
        }
    };
    let mut reuse_c = OpCounters::default();
    let mut plain_c = OpCounters::default();
    let mut max_diff = 0.0f64;
    let (mut t_reuse, mut t_plain) = (0.0, 0.0);
    for b in &batches {
        let t0 = Instant::now();
        let r = forward_batch(&table, b, true)?;
        t_reuse += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let p = forward_batch(&table, b, false)?;
        t_plain += t0.elapsed().as_secs_f64();
        reuse_c += r.counters;
        plain_c += p.counters;
        for (x, y) in r.embeddings.iter().zip(&p.embeddings) {
            max_diff = max_diff.max((x.as_f64() - y.as_f64()).abs());
        }
    }
    let tol = if T::NAME == "f64" { 1e-12 } else { 1e-5 };
    if max_diff > tol {
        return Err(Error::Internal(format!("reuse changed lookup results by {max_diff}")).into());
    }
    let lookups = reuse_c.buffer_hits + reuse_c.buffer_misses;
    let report = BenchReport {
        m: shape.m().to_vec(),
        n: shape.n().to_vec(),
        batches: batches.len(),
        indices: batches.iter().flatten().map(IndexBag::len).sum(),
        slice_mults_reuse: reuse_c.slice_mults,
        slice_mults_plain: plain_c.slice_mults,
        count_ratio: reuse_c.slice_mults as f64 / plain_c.slice_mults.max(1) as f64,
        buffer_hits: reuse_c.buffer_hits,
        buffer_misses: reuse_c.buffer_misses,
        hit_rate: if lookups == 0 { 0.0 } else { reuse_c.buffer_hits as f64 / lookups as f64 },
        max_abs_diff: max_diff,
        wall_ms_reuse: t_reuse * 1e3,
        wall_ms_plain: t_plain * 1e3,
    };
    let text = serde_json::to_string(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&a.common.out, format!("{text}\n")).map_err(Error::from)?;
    println!("{text}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub records: usize,
    pub train_steps: usize,
    pub first_loss: f64,
    pub last_train_loss: f64,
    pub test: Option<MetricsRecord>,
    pub total_slice_mults: u64,
    pub total_buffer_hits: u64,
    pub total_buffer_misses: u64,
}

pub fn read_metrics(text: &str) -> CliResult<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Core(Error::Parse { line: n + 1, msg: e.to_string() }))
        })
        .collect()
}

pub fn summarize(records: &[MetricsRecord]) -> CliResult<Summary> {
    let train: Vec<&MetricsRecord> = records.iter().filter(|r| r.phase == "train").collect();
    let (first, last) = match (train.first(), train.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Empty("training records").into()),
    };
    Ok(Summary {
        records: records.len(),
        train_steps: last.step,
        first_loss: first.loss,
        last_train_loss: last.loss,
        test: records.iter().rev().find(|r| r.phase == "test").cloned(),
        total_slice_mults: train.iter().map(|r| r.slice_mults).sum(),
        total_buffer_hits: train.iter().map(|r| r.buffer_hits).sum(),
        total_buffer_misses: train.iter().map(|r| r.buffer_misses).sum(),
    })
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.metrics).map_err(Error::from)?;
    let summary = summarize(&read_metrics(&text)?)?;
    let out = serde_json::to_string(&summary).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(p) = &a.out {
        std::fs::write(p, format!("{out}\n")).map_err(Error::from)?;
    }
    println!("{out}");
    Ok(())
}

/// Parameter accounting for a model built from `cfg` over `rows_per_field`.
pub fn compression_ratio(rows_per_field: &[usize], embed_dim: usize, rank: usize, cores: usize, tt_min_rows: usize) -> crate::Result<f64> {
    let mut dense = 0usize;
    let mut compressed = 0usize;
    for &rows in rows_per_field {
        dense += rows * embed_dim;
        if rows >= tt_min_rows {
            let shape = factorize_dims(rows, embed_dim, cores)?.into_shape(rank)?;
            compressed += param_stats(&shape, rows, embed_dim).tt_params;
        } else {
            compressed += rows * embed_dim;
        }
    }
    Ok(dense as f64 / compressed as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let m = parse_config_file("# comment\nlr = 0.1\nbatch-size=64\n\n").unwrap();
        assert_eq!(m["lr"], "0.1");
        assert_eq!(m["batch_size"], "64");
        assert!(matches!(parse_config_file("bogus=1"), Err(CliError::Usage(_))));
        assert!(parse_config_file("lr").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "lr=0.2\nmomentum=0.5\ndata=x.csv\nout=o\nreuse=off\n").unwrap();
        let args = TrainArgs { config: Some(p), lr: Some(0.3), ..Default::default() };
        let c = args.resolve().unwrap();
        assert_eq!(c.lr, 0.3);
        assert_eq!(c.momentum, 0.5);
        assert!(!c.reuse);
        assert_eq!(c.data, PathBuf::from("x.csv"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::Core(Error::NonFinite("x".into())).exit_code(), EXIT_NUMERIC);
        assert_eq!(CliError::Core(Error::Parse { line: 1, msg: "x".into() }).exit_code(), EXIT_DATA);
        assert_eq!(main_with_args(["efftt", "bogus"]), EXIT_USAGE);
    }

    #[test]
    fn summary_of_stream() {
        let rec = |phase: &str, step, loss| MetricsRecord {
            phase: String::from(phase),
            step,
            loss,
            accuracy: 0.5,
            recall: 0.5,
            f1: 0.5,
            slice_mults: 10,
            buffer_hits: 1,
            buffer_misses: 2,
            samples_per_sec: 1.0,
        };
        let recs = [rec("train", 10, 0.7), rec("train", 20, 0.4), rec("test", 20, 0.45)];
        let text: String = recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        let s = summarize(&read_metrics(&text).unwrap()).unwrap();
        assert_eq!(s.train_steps, 20);
        assert_eq!(s.first_loss, 0.7);
        assert_eq!(s.total_slice_mults, 20);
        assert_eq!(s.test.unwrap().loss, 0.45);
    }
}
