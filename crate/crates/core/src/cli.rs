//! Command-line interface: one subcommand per pipeline stage.
//!
//! Every command reads its inputs, computes everything in memory and only
//! then writes its outputs, so a failing command leaves no partial files.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::builders::{self, Regime, SamplerConfig, SyntheticConfig};
use crate::checkpoint::{self, CheckpointMeta, TrainSummary};
use crate::config::{self, RunConfig};
use crate::data::{self, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::metrics::{self, GroupPooling};
use crate::mix;
use crate::probe::{Probe, ProbeConfig, DECISION_THRESHOLD};
use crate::span::SpanKind;
use crate::store::{self, EmbeddingStore};
use crate::trainer::{self, Dataset};

/// Environment variable supplying the default output directory.
pub const OUT_DIR_ENV: &str = "SPANPROBE_OUT_DIR";

pub const CHECKPOINT_FILE: &str = "probe.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RUN_CONFIG_FILE: &str = "run_config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const GROUP_DELTAS_FILE: &str = "group_deltas.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const LAYER_WEIGHTS_FILE: &str = "layer_weights.csv";

/// Process exit codes, one per failure category.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const UNKNOWN_NAME: i32 = 4;
    pub const STORE: i32 = 5;
    pub const DATA: i32 = 6;
    pub const CHECKPOINT: i32 = 7;
    pub const GRADCHECK: i32 = 8;
    pub const NON_FINITE: i32 = 9;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidSplit { .. } => exit::CONFIG,
        Error::UnknownMethod(_) | Error::UnknownTask(_) => exit::UNKNOWN_NAME,
        Error::Store(_) => exit::STORE,
        Error::Record { .. } | Error::Data(_) | Error::Shape(_) | Error::Io(_) | Error::Csv(_) => {
            exit::DATA
        }
        Error::Checkpoint(_) => exit::CHECKPOINT,
        Error::GradCheck(_) => exit::GRADCHECK,
        Error::NonFinite { .. } => exit::NON_FINITE,
        Error::CacheMismatch(_) => exit::INTERNAL,
    }
}

/// Hint printed after the error message.
pub fn hint(err: &Error) -> Option<&'static str> {
    match err {
        Error::UnknownMethod(_) => Some("methods: avg, attn, max, endpoint, diffsum, coherent"),
        Error::UnknownTask(_) => Some(
            "tasks: constituent-labeling, constituent-detection, nel, srl, mention-detection, coref, synthetic",
        ),
        Error::Config(_) => Some(
            "config keys: lr, batch_size, eval_interval, lr_patience, lr_factor, stop_patience, \
             beta1, beta2, adam_eps, seed, max_steps, proj_dim, hidden_dim, dropout, mix_mode",
        ),
        Error::Store(_) => Some("check the --store path; stores are written by the extractor or gen-synthetic"),
        _ => None,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "spanprobe",
    version,
    about = "Probe span representations of layered encoder embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Build a detection task by negative sampling from labeled spans.
    BuildDataset(BuildDatasetArgs),
    /// Generate a synthetic corpus with its embedding store.
    GenSynthetic(GenSyntheticArgs),
    /// Train one probe (one task x encoder x method cell).
    Train(TrainArgs),
    /// Score a trained probe on a labeled split.
    Eval(EvalArgs),
    /// Per-label group recall deltas and result grids.
    Analyze(AnalyzeArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Write the scalar-mix layer weights of a trained probe.
    ExportLayers(ExportLayersArgs),
}

#[derive(Debug, Args)]
pub struct OutDir {
    /// Output directory [default: $SPANPROBE_OUT_DIR, else the current directory].
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// constituent-detection or mention-detection.
    #[arg(long)]
    pub task: String,
    /// Source JSONL records (labeled constituents or gold mentions).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negatives per positive [default: 1 for constituents, 5 for mentions].
    #[arg(long)]
    pub negative_ratio: Option<usize>,
    #[arg(long)]
    pub max_attempts: Option<usize>,
    /// Name of the output records file inside the output directory.
    #[arg(long, default_value = "dataset.jsonl")]
    pub output: String,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    /// boundary, content or separable.
    #[arg(long)]
    pub regime: String,
    #[arg(long, default_value_t = 5000)]
    pub train_targets: usize,
    #[arg(long, default_value_t = 1000)]
    pub valid_targets: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    /// Hidden layers; the store holds this many plus the embedding layer.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

/// Command-line overrides; each flag mirrors the config key of the same name.
#[derive(Debug, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub eval_interval: Option<String>,
    #[arg(long)]
    pub lr_patience: Option<String>,
    #[arg(long)]
    pub lr_factor: Option<String>,
    #[arg(long)]
    pub stop_patience: Option<String>,
    #[arg(long)]
    pub beta1: Option<String>,
    #[arg(long)]
    pub beta2: Option<String>,
    #[arg(long)]
    pub adam_eps: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub max_steps: Option<String>,
    #[arg(long)]
    pub proj_dim: Option<String>,
    #[arg(long)]
    pub hidden_dim: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    #[arg(long)]
    pub mix_mode: Option<String>,
}

impl ConfigOverrides {
    pub fn pairs(&self) -> Vec<(&'static str, &str)> {
        let fields = [
            &self.lr,
            &self.batch_size,
            &self.eval_interval,
            &self.lr_patience,
            &self.lr_factor,
            &self.stop_patience,
            &self.beta1,
            &self.beta2,
            &self.adam_eps,
            &self.seed,
            &self.max_steps,
            &self.proj_dim,
            &self.hidden_dim,
            &self.dropout,
            &self.mix_mode,
        ];
        config::KEYS
            .into_iter()
            .zip(fields)
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub method: String,
    /// Encoder identifier recorded in the checkpoint metadata.
    #[arg(long, default_value = "unknown")]
    pub encoder: String,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    /// Embedding store covering the training sentences.
    #[arg(long)]
    pub store: PathBuf,
    /// Store for the validation sentences [default: --store].
    #[arg(long)]
    pub valid_store: Option<PathBuf>,
    /// Flat key = value config file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Predictions CSVs of the runs in group A (e.g. boundary-based methods).
    #[arg(long, num_args = 1..)]
    pub group_a: Vec<PathBuf>,
    /// Predictions CSVs of the runs in group B.
    #[arg(long, num_args = 1..)]
    pub group_b: Vec<PathBuf>,
    /// Labels with fewer gold instances are left out.
    #[arg(long, default_value_t = 100)]
    pub min_support: usize,
    /// Pool a group as the union of its runs' predictions instead of mean recall.
    #[arg(long)]
    pub union: bool,
    /// CSV of `encoder,method,score` cells to lay out as a grid.
    #[arg(long)]
    pub cells: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Methods to check [default: all six].
    #[arg(long, num_args = 1..)]
    pub method: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportLayersArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
}

/// Files to write once a command has finished computing.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (path, bytes) in self.files {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn examples_bytes(examples: &[data::ProbingExample]) -> Result<Vec<u8>> {
    csv_bytes(|buf| data::write_examples(buf, examples))
}

/// Runs a command; returns the files it wrote plus a summary line for stdout.
pub fn run(command: &Command) -> Result<(Vec<PathBuf>, String)> {
    let (outputs, summary) = match command {
        Command::BuildDataset(a) => build_dataset(a)?,
        Command::GenSynthetic(a) => gen_synthetic(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Analyze(a) => analyze(a)?,
        Command::Gradcheck(a) => gradcheck(a)?,
        Command::ExportLayers(a) => export_layers(a)?,
    };
    Ok((outputs.commit()?, summary))
}

pub fn build_dataset(a: &BuildDatasetArgs) -> Result<(Outputs, String)> {
    let task: TaskKind = a.task.parse()?;
    let sources = data::read_examples(&a.input, Some(task.arity()))?;
    let mut cfg = match task {
        TaskKind::ConstituentDetection => SamplerConfig::constituent_detection(a.seed),
        TaskKind::MentionDetection => SamplerConfig::mention_detection(a.seed),
        other => {
            return Err(Error::Config(format!(
                "build-dataset supports constituent-detection and mention-detection, not {other}"
            )))
        }
    };
    if let Some(r) = a.negative_ratio {
        cfg.negative_ratio = r;
    }
    if let Some(m) = a.max_attempts {
        cfg.max_attempts = m;
    }
    if cfg.negative_ratio == 0 || cfg.max_attempts == 0 {
        return Err(Error::Config(
            "negative_ratio and max_attempts must be at least 1".into(),
        ));
    }
    let built = match task {
        TaskKind::ConstituentDetection => builders::build_constituent_detection(&sources, &cfg)?,
        _ => builders::build_mention_detection(&sources, &cfg)?,
    };
    let mut out = Outputs::default();
    out.add(
        a.out.out_dir.join(&a.output),
        examples_bytes(&built.examples)?,
    );
    let report_name = format!("{}.report.csv", a.output.trim_end_matches(".jsonl"));
    out.add(
        a.out.out_dir.join(report_name),
        csv_bytes(|b| built.write_report(b))?,
    );
    let targets: usize = built.examples.iter().map(|e| e.targets.len()).sum();
    Ok((
        out,
        format!(
            "{targets} targets, quota shortfall {}",
            built.total_shortfall()
        ),
    ))
}

pub fn gen_synthetic(a: &GenSyntheticArgs) -> Result<(Outputs, String)> {
    let regime: Regime = a.regime.parse()?;
    let mut cfg = SyntheticConfig::new(regime, a.train_targets, a.valid_targets, a.seed);
    cfg.d_model = a.d_model;
    cfg.layer_count = a.layers;
    let corpus = builders::gen_synthetic(&cfg)?;
    let mut out = Outputs::default();
    out.add(
        a.out.out_dir.join("train.jsonl"),
        examples_bytes(&corpus.train)?,
    );
    out.add(
        a.out.out_dir.join("valid.jsonl"),
        examples_bytes(&corpus.valid)?,
    );
    out.add(
        a.out.out_dir.join("store.spe"),
        store::encode_store(&corpus.sentences)?,
    );
    Ok((out, format!("{} sentences", corpus.sentences.len())))
}

/// Resolved configuration: defaults, then the config file, then flags.
pub fn resolve_config(file: Option<&Path>, overrides: &ConfigOverrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let pairs = config::load(path)?;
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    }
    cfg.apply(overrides.pairs())?;
    Ok(cfg)
}

fn open_store(path: &Path) -> Result<EmbeddingStore> {
    Ok(EmbeddingStore::open(path)?)
}

pub fn train(a: &TrainArgs) -> Result<(Outputs, String)> {
    let task: TaskKind = a.task.parse()?;
    let method: SpanKind = a.method.parse()?;
    let run = resolve_config(a.config.as_deref(), &a.overrides)?;
    let store = open_store(&a.store)?;
    let valid_store = match &a.valid_store {
        Some(p) => open_store(p)?,
        None => open_store(&a.store)?,
    };
    let train_examples = data::read_examples(&a.train, Some(task.arity()))?;
    let valid_examples = data::read_examples(&a.valid, Some(task.arity()))?;
    let labels = data::build_label_vocab(&train_examples)?;
    let spec = TaskSpec::new(task.name(), task.arity(), labels)?;
    let train_set = Dataset::build(&train_examples, &store, &spec)?;
    let valid_set = Dataset::build(&valid_examples, &valid_store, &spec)?;

    let mut probe_cfg = ProbeConfig::new(
        method,
        task.arity(),
        store.layer_count(),
        store.dim(),
        spec.labels.len(),
    );
    probe_cfg.separate_projections = task.separate_projections();
    probe_cfg.proj_dim = run.proj_dim;
    probe_cfg.hidden_dim = run.hidden_dim;
    probe_cfg.dropout = run.dropout;
    probe_cfg.mix_mode = run.mix_mode;
    let probe = Probe::<f64>::new(probe_cfg.clone(), run.train.seed)?;
    let (best, log) = trainer::train(probe, &train_set, &valid_set, &run.train)?;

    let meta = CheckpointMeta {
        task: task.name().to_string(),
        encoder: a.encoder.clone(),
        seed: run.train.seed,
        labels: spec.labels.clone(),
        probe: probe_cfg,
        training: Some(TrainSummary {
            stop_reason: log.stop_reason.to_string(),
            best_step: log.best_step,
            best_f1: log.best_f1,
            steps: log.records.last().map_or(0, |r| r.step),
        }),
    };
    let ckpt = a.out.out_dir.join(CHECKPOINT_FILE);
    let meta_json =
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Checkpoint(e.to_string()))? + "\n";
    let mut out = Outputs::default();
    out.add(ckpt.clone(), checkpoint::encode_tensors(&best));
    out.add(checkpoint::meta_path(&ckpt), meta_json.into_bytes());
    out.add(
        a.out.out_dir.join(TRAIN_LOG_FILE),
        csv_bytes(|b| log.write_csv(b))?,
    );
    let config_text: String = run
        .to_pairs()
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    out.add(
        a.out.out_dir.join(RUN_CONFIG_FILE),
        config_text.into_bytes(),
    );
    Ok((
        out,
        format!(
            "stop={} best_step={} best_valid_f1={:.4}",
            log.stop_reason, log.best_step, log.best_f1
        ),
    ))
}

pub fn eval(a: &EvalArgs) -> Result<(Outputs, String)> {
    let store = open_store(&a.store)?;
    let (probe, meta) = checkpoint::load_checkpoint::<f64>(&a.checkpoint)?;
    if store.layer_count() != meta.probe.layer_count || store.dim() != meta.probe.d_model {
        return Err(Error::Config(format!(
            "store has {} layers of dim {}, probe expects {} of dim {}",
            store.layer_count(),
            store.dim(),
            meta.probe.layer_count,
            meta.probe.d_model
        )));
    }
    let spec = TaskSpec::new(meta.task.clone(), meta.probe.arity, meta.labels.clone())?;
    let examples = data::read_examples(&a.data, Some(meta.probe.arity))?;
    let dataset = Dataset::build(&examples, &store, &spec)?;
    let evaluation = trainer::evaluate(&probe, &dataset)?;
    let golds = dataset.golds();
    let mut out = Outputs::default();
    out.add(
        a.out.out_dir.join(METRICS_FILE),
        csv_bytes(|b| metrics::write_metrics(b, &spec.labels, &evaluation.report))?,
    );
    out.add(
        a.out.out_dir.join(PREDICTIONS_FILE),
        csv_bytes(|b| {
            metrics::write_predictions(
                b,
                &spec.labels,
                &golds,
                &evaluation.probabilities,
                DECISION_THRESHOLD,
            )
        })?,
    );
    let r = &evaluation.report;
    Ok((
        out,
        format!(
            "targets={} precision={:.4} recall={:.4} f1={:.4}",
            r.target_count, r.precision, r.recall, r.f1
        ),
    ))
}

fn read_runs(paths: &[PathBuf]) -> Result<Vec<metrics::RunDecisions>> {
    paths
        .iter()
        .map(|p| {
            let file = fs::File::open(p)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?;
            metrics::read_predictions(BufReader::new(file))
        })
        .collect()
}

pub fn analyze(a: &AnalyzeArgs) -> Result<(Outputs, String)> {
    let wants_deltas = !a.group_a.is_empty() || !a.group_b.is_empty();
    if !wants_deltas && a.cells.is_none() {
        return Err(Error::Config(
            "analyze needs --group-a/--group-b and/or --cells".into(),
        ));
    }
    let mut out = Outputs::default();
    let mut summary = Vec::new();
    if wants_deltas {
        if a.group_a.is_empty() || a.group_b.is_empty() {
            return Err(Error::Config(
                "both --group-a and --group-b need at least one predictions file".into(),
            ));
        }
        let pooling = if a.union {
            GroupPooling::Union
        } else {
            GroupPooling::MeanRecall
        };
        let deltas = metrics::group_delta_recall(
            &read_runs(&a.group_a)?,
            &read_runs(&a.group_b)?,
            a.min_support,
            pooling,
        )?;
        out.add(
            a.out.out_dir.join(GROUP_DELTAS_FILE),
            csv_bytes(|b| metrics::write_group_deltas(b, &deltas))?,
        );
        summary.push(format!(
            "{} labels with support >= {}",
            deltas.len(),
            a.min_support
        ));
    }
    if let Some(path) = &a.cells {
        let file = fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let grid = metrics::build_grid(&metrics::read_grid_cells(BufReader::new(file))?)?;
        out.add(
            a.out.out_dir.join(GRID_FILE),
            csv_bytes(|b| metrics::write_grid(b, &grid))?,
        );
        summary.push(format!(
            "{}x{} grid",
            grid.methods.len(),
            grid.encoders.len()
        ));
    }
    Ok((out, summary.join("; ")))
}

/// Worst relative error per method and arity; fails when any exceeds the tolerance.
pub fn gradcheck(a: &GradcheckArgs) -> Result<(Outputs, String)> {
    let methods = if a.method.is_empty() {
        SpanKind::ALL.to_vec()
    } else {
        a.method
            .iter()
            .map(|m| m.parse())
            .collect::<Result<Vec<SpanKind>>>()?
    };
    let reports = gradcheck::run_suite(&methods, a.instances, a.seed)?;
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for r in &reports {
        worst = worst.max(r.max_rel_err);
        lines.push(format!(
            "{:<9} {:<8} max_rel_err={:.3e} ({}, {} partials) {}",
            r.method.name(),
            format!("{:?}", r.arity),
            r.max_rel_err,
            r.worst_tensor,
            r.checked,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    lines.push(format!(
        "max relative error {worst:.3e} (tolerance {:.0e})",
        gradcheck::TOLERANCE
    ));
    let text = lines.join("\n");
    if reports.iter().all(|r| r.passed()) {
        Ok((Outputs::default(), text))
    } else {
        Err(Error::GradCheck(text))
    }
}

pub fn export_layers(a: &ExportLayersArgs) -> Result<(Outputs, String)> {
    let (probe, _) = checkpoint::load_checkpoint::<f64>(&a.checkpoint)?;
    let weights = probe.params.mix.weights();
    let mut out = Outputs::default();
    out.add(
        a.out.out_dir.join(LAYER_WEIGHTS_FILE),
        csv_bytes(|b| mix::write_layer_weights(b, &weights))?,
    );
    let peak = weights
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .map_or(0, |(i, _)| i);
    Ok((
        out,
        format!("{} layers, peak weight at layer {peak}", weights.len()),
    ))
}
