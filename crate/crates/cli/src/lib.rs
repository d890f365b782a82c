//! Command-line pipeline: ingest → diversity → prune → train → eval → stream,
//! plus synthetic pools, benchmarks and plot exports.
//!
//! Every subcommand emits a [`RunReport`] as JSON. Reports carry a SHA-256 of
//! the canonical subcommand configuration and omit wall-clock timestamps
//! unless `--timestamp` is given, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fusionshot::consensus::{evaluate, EvalSummary, Plurality, SimpleMean};
use fusionshot::diversity::{DiversityReport, MaskScorer, Weights};
use fusionshot::fusion::{self, EpochStats, FusionMetadata, FusionParams, InputNormalization, StreamConfig, StreamTrace, TrainConfig};
use fusionshot::logitstore::{ingest, write_pool};
use fusionshot::pruner::{self, candidate_count, SearchConfig, SearchMethod, SearchResult};
use fusionshot::synth::{self, presets, SynthSpec};
use fusionshot::{EnsembleMask, Pool};

pub const TOOL: &str = "fusionshot";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] fusionshot::Error),
    #[error("export kind mismatch: {0}")]
    KindMismatch(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 for usage errors, 1 for everything that went wrong with the data.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser, Serialize)]
#[command(name = "fusionshot", version, about = "Focal-diversity pruning and fusion of few-shot model ensembles")]
pub struct Cli {
    /// Worker threads for parallel stages (falls back to FUSIONSHOT_THREADS).
    #[arg(long, global = true, env = "FUSIONSHOT_THREADS")]
    #[serde(skip)]
    pub threads: Option<usize>,

    /// Record start/finish wall-clock times in the report (breaks byte-identical reruns).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub timestamp: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Load and validate a pool manifest.
    Ingest(IngestArgs),
    /// Focal diversity, kappa and pruning score of one mask.
    Diversity(DiversityArgs),
    /// Rank candidate ensembles by pruning score.
    Prune(PruneArgs),
    /// Train the fusion network for one mask.
    Train(TrainArgs),
    /// Episodic accuracy of a combiner on a split.
    Eval(EvalArgs),
    /// Streaming adaptation over a sequence of batch manifests.
    Stream(StreamArgs),
    /// Write a synthetic pool described by a JSON spec.
    Synth(SynthArgs),
    /// Timing benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Plot-ready CSV from earlier reports.
    Export(ExportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ReportOut {
    /// Write the JSON report here instead of standard output.
    #[arg(long = "out")]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct WeightArgs {
    #[arg(long, default_value_t = 0.6)]
    pub w1: f64,
    #[arg(long, default_value_t = 0.4)]
    pub w2: f64,
}

impl WeightArgs {
    fn weights(&self) -> CliResult<Weights> {
        Weights::new(self.w1, self.w2).map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Validate only; print nothing on success.
    #[arg(long)]
    pub check: bool,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Args, Serialize)]
pub struct DiversityArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Binary mask, most significant digit = highest model index (e.g. 0b0110101).
    #[arg(long)]
    pub mask: String,
    #[command(flatten)]
    pub weights: WeightArgs,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Bf,
    Ga,
}

#[derive(Debug, Args, Serialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "ga")]
    pub method: MethodArg,
    #[command(flatten)]
    pub weights: WeightArgs,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Defense mode: only masks containing this model, scored by its sigma.
    #[arg(long)]
    pub victim: Option<String>,
    /// Keep every scored candidate (needed for diversity_scatter exports).
    #[arg(long)]
    pub record_visited: bool,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationArg {
    Softmax,
    Raw,
}

impl From<NormalizationArg> for InputNormalization {
    fn from(n: NormalizationArg) -> Self {
        match n {
            NormalizationArg::Softmax => InputNormalization::Softmax,
            NormalizationArg::Raw => InputNormalization::Raw,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "softmax")]
    pub normalization: NormalizationArg,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "100,100")]
    pub hidden: Vec<usize>,
}

impl TrainingArgs {
    fn apply(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden.clone(),
            learning_rate: self.lr,
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            batch_size: self.batch_size,
            patience: self.patience.or(base.patience),
            seed: self.seed,
            normalization: self.normalization.into(),
            ..base
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub mask: String,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Where to write the trained parameters.
    #[arg(long = "out")]
    #[serde(skip)]
    pub out: PathBuf,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    #[serde(skip)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerArg {
    Plurality,
    Mean,
    Fusion,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub mask: String,
    #[arg(long, value_enum, default_value = "plurality")]
    pub combiner: CombinerArg,
    /// Trained parameters (required for the fusion combiner).
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value = "novel")]
    pub split: String,
    #[arg(long, default_value_t = fusionshot::consensus::DEFAULT_EPISODES)]
    pub episodes: usize,
    /// Append a CSV row (method,split,episodes,accuracy,ci95) to this file.
    #[arg(long)]
    #[serde(skip)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Args, Serialize)]
pub struct StreamArgs {
    /// Batch manifests in stream order.
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub manifest_list: Vec<PathBuf>,
    /// Starting parameters; a seeded network is initialized when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Mask over the batch pools; defaults to the params' mask, else all models.
    #[arg(long)]
    pub mask: Option<String>,
    /// Retrain from a fresh initialization on every batch.
    #[arg(long)]
    pub cold_start: bool,
    #[arg(long, default_value = "stream")]
    pub split: String,
    #[arg(long, default_value_t = 1500)]
    pub train_episodes: usize,
    #[arg(long, default_value_t = 300)]
    pub val_episodes: usize,
    #[arg(long, default_value_t = 200)]
    pub test_episodes: usize,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchCommand {
    /// Brute force vs genetic search wall time per pool size.
    Prune(BenchPruneArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct BenchPruneArgs {
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20")]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Validation episodes of each synthetic pool.
    #[arg(long, default_value_t = 300)]
    pub episodes: usize,
    /// Print a text table instead of the JSON report.
    #[arg(long)]
    #[serde(skip)]
    pub table: bool,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ExportKind {
    DiversityScatter,
    StreamTrace,
    ErrorBars,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    /// Report files produced by earlier runs.
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: ExportKind,
    /// CSV destination.
    #[arg(long = "csv")]
    #[serde(skip)]
    pub csv: PathBuf,
    #[command(flatten)]
    pub report: ReportOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub pool_name: String,
    pub k: usize,
    pub model_ids: Vec<String>,
    pub episodes: BTreeMap<String, usize>,
    /// Per-split, per-model top-1 accuracy.
    pub accuracies: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub params_path: PathBuf,
    pub metadata: FusionMetadata,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub manifests: Vec<PathBuf>,
    /// Realized per-model accuracy for every written split (batches in order).
    pub accuracies: Vec<BTreeMap<String, Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub candidates: u64,
    pub bf_seconds: f64,
    pub ga_seconds: f64,
    pub ga_visited: u64,
    pub ga_coverage: f64,
    pub ga_generations: usize,
    pub same_top1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub kind: ExportKind,
    pub csv: PathBuf,
    pub rows: usize,
}

/// Structured payload of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum Output {
    Ingest(IngestSummary),
    Diversity(DiversityReport),
    Search(SearchResult),
    Train(TrainSummary),
    Eval(EvalSummary),
    Stream(StreamTrace),
    Synth(SynthSummary),
    Bench(Vec<BenchRow>),
    Export(ExportSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    /// Argument vector without the program name.
    pub command: Vec<String>,
    /// SHA-256 of the canonical JSON of the parsed subcommand.
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
    pub output: Output,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }
}

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_vec(&serde_json::to_value(value).expect("config serializes")).expect("value serializes");
    hex::encode(Sha256::digest(&canonical))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.into(), source })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CliError::Io { path: parent.into(), source })?;
    }
    fs::write(path, text).map_err(|source| CliError::Io { path: path.into(), source })
}

fn parse_mask(text: &str, pool: &Pool) -> CliResult<EnsembleMask> {
    EnsembleMask::parse(text, pool.n_models()).map_err(|e| CliError::Usage(e.to_string()))
}

fn load_params(path: &Path) -> CliResult<FusionParams> {
    read_json(path)
}

/// Outcome of a run: the report plus where it should go.
pub struct Run {
    pub report: Option<RunReport>,
    pub destination: Option<PathBuf>,
    /// Text to print instead of the JSON report.
    pub text: Option<String>,
}

/// Parses nothing; executes an already-parsed command line.
pub fn execute(cli: &Cli, argv: &[String]) -> CliResult<Run> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists (e.g. repeated calls in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let started_at = cli.timestamp.then(unix_now);
    let mut text = None;
    let (output, destination) = match &cli.command {
        Command::Ingest(a) => {
            let pool = ingest(&a.manifest)?;
            info!("ingested {} models from {}", pool.n_models(), a.manifest.display());
            if a.check {
                eprintln!("ok: {} models, K={}", pool.n_models(), pool.k());
                return Ok(Run { report: None, destination: None, text: None });
            }
            (Output::Ingest(ingest_summary(&pool)?), a.report.out.clone())
        }
        Command::Diversity(a) => {
            let pool = ingest(&a.manifest)?;
            let mask = parse_mask(&a.mask, &pool)?;
            let scorer = MaskScorer::new(&pool, &a.split)?;
            (Output::Diversity(scorer.report(&mask, a.weights.weights()?, None, true)?), a.report.out.clone())
        }
        Command::Prune(a) => {
            let pool = ingest(&a.manifest)?;
            let config = SearchConfig {
                method: match a.method {
                    MethodArg::Bf => SearchMethod::BruteForce,
                    MethodArg::Ga => SearchMethod::Genetic,
                },
                weights: a.weights.weights()?,
                top_k: a.top_k,
                seed: a.seed,
                split: a.split.clone(),
                record_visited: a.record_visited,
                ..SearchConfig::default()
            };
            config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let result = match &a.victim {
                Some(v) => pruner::defense_search(&pool, &config, v)?,
                None => pruner::search(&pool, &config)?,
            };
            info!("visited {} of {} candidates", result.visited_count, result.candidate_count);
            (Output::Search(result), a.report.out.clone())
        }
        Command::Train(a) => {
            let pool = ingest(&a.manifest)?;
            let mask = parse_mask(&a.mask, &pool)?;
            let config = a.training.apply(TrainConfig::default());
            config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let outcome = fusion::train(&pool, &mask, &config)?;
            info!(
                "trained {} epochs, best val accuracy {:?} at epoch {:?}",
                outcome.params.metadata.epochs_trained, outcome.params.metadata.best_val_accuracy, outcome.params.metadata.best_epoch
            );
            write_text(&a.out, &(serde_json::to_string(&outcome.params).expect("params serialize") + "\n"))?;
            let summary = TrainSummary {
                params_path: a.out.clone(),
                metadata: outcome.params.metadata.clone(),
                history: outcome.history,
            };
            (Output::Train(summary), a.report_out.clone())
        }
        Command::Eval(a) => {
            let pool = ingest(&a.manifest)?;
            let mask = parse_mask(&a.mask, &pool)?;
            let summary = match a.combiner {
                CombinerArg::Plurality => evaluate(&Plurality, &pool, &mask, &a.split, a.episodes)?,
                CombinerArg::Mean => evaluate(&SimpleMean, &pool, &mask, &a.split, a.episodes)?,
                CombinerArg::Fusion => {
                    let path = a.params.as_ref().ok_or_else(|| CliError::Usage("--combiner fusion needs --params".into()))?;
                    fusion::predict_eval(&load_params(path)?, &pool, &mask, &a.split, a.episodes)?
                }
            };
            if let Some(csv_path) = &a.csv {
                append_eval_row(csv_path, &summary)?;
            }
            (Output::Eval(summary), a.report.out.clone())
        }
        Command::Stream(a) => {
            let batches = a.manifest_list.iter().map(|p| ingest(p)).collect::<fusionshot::Result<Vec<_>>>()?;
            let initial = a.params.as_deref().map(load_params).transpose()?;
            let first = &batches[0];
            let mask = match (&a.mask, &initial) {
                (Some(text), _) => parse_mask(text, first)?,
                (None, Some(p)) => p.metadata.mask,
                (None, None) => EnsembleMask::full(first.n_models())?,
            };
            let base = StreamConfig::default();
            let config = StreamConfig {
                train_episodes: a.train_episodes,
                val_episodes: a.val_episodes,
                test_episodes: a.test_episodes,
                cold_start: a.cold_start,
                split: a.split.clone(),
                train: a.training.apply(base.train),
            };
            config.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let trace = fusion::stream_adapt(&batches, &mask, &config, initial)?;
            for b in &trace.batches {
                info!("batch {}: fusion {:.2}% (best member {:.2}%)", b.batch, b.summary.accuracy, b.best_member_accuracy);
            }
            (Output::Stream(trace), a.report.out.clone())
        }
        Command::Synth(a) => {
            let spec: SynthSpec = read_json(&a.spec)?;
            (Output::Synth(write_synth(&spec, &a.out_dir)?), a.report.out.clone())
        }
        Command::Bench(BenchCommand::Prune(a)) => {
            let rows = bench_prune(&a.n, a.episodes, a.seed)?;
            if a.table {
                text = Some(bench_table(&rows));
            }
            (Output::Bench(rows), a.report.out.clone())
        }
        Command::Export(a) => {
            let reports = a.input.iter().map(|p| read_json::<RunReport>(p)).collect::<CliResult<Vec<_>>>()?;
            let rows = export_plot_data(&reports, a.kind, &a.csv)?;
            let summary = ExportSummary {
                kind: a.kind,
                csv: a.csv.clone(),
                rows,
            };
            (Output::Export(summary), a.report.out.clone())
        }
    };
    let report = RunReport {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: argv.to_vec(),
        config_hash: config_hash(&(VERSION, &cli.command)),
        started_at,
        finished_at: cli.timestamp.then(unix_now),
        output,
    };
    Ok(Run {
        report: Some(report),
        destination,
        text,
    })
}

fn ingest_summary(pool: &Pool) -> CliResult<IngestSummary> {
    let mut episodes = BTreeMap::new();
    let mut accuracies = BTreeMap::new();
    for split in pool.split_tags() {
        episodes.insert(split.to_string(), pool.episodes(split)?);
        accuracies.insert(split.to_string(), pool.correctness(split)?.accuracies());
    }
    Ok(IngestSummary {
        pool_name: pool.name().to_string(),
        k: pool.k(),
        model_ids: pool.model_ids().iter().map(|s| s.to_string()).collect(),
        episodes,
        accuracies,
    })
}

fn split_accuracies(pool: &Pool) -> CliResult<BTreeMap<String, Vec<f64>>> {
    pool.split_tags()
        .map(|s| Ok((s.to_string(), pool.correctness(s)?.accuracies())))
        .collect()
}

/// Writes a plain pool to `dir`, or one sub-directory per batch for stream specs.
pub fn write_synth(spec: &SynthSpec, dir: &Path) -> CliResult<SynthSummary> {
    let mut manifests = Vec::new();
    let mut accuracies = Vec::new();
    if spec.stream.is_some() {
        for (b, batch) in synth::generate_stream(spec)?.iter().enumerate() {
            manifests.push(write_pool(&batch.pool, &dir.join(format!("batch_{b:03}")))?);
            accuracies.push(split_accuracies(&batch.pool)?);
        }
    } else {
        let generated = synth::generate(spec)?;
        manifests.push(write_pool(&generated.pool, dir)?);
        accuracies.push(split_accuracies(&generated.pool)?);
    }
    Ok(SynthSummary { manifests, accuracies })
}

/// Brute force and genetic search timed on seeded random pools of each size.
pub fn bench_prune(sizes: &[usize], episodes: usize, seed: u64) -> CliResult<Vec<BenchRow>> {
    sizes
        .iter()
        .map(|&n| {
            if !(2..=fusionshot::mask::MAX_POOL).contains(&n) {
                return Err(CliError::Usage(format!("pool size {n} outside 2..={}", fusionshot::mask::MAX_POOL)));
            }
            let pool = synth::generate(&presets::random_pool(n, episodes, seed.wrapping_add(n as u64)))?.pool;
            let bf_config = SearchConfig {
                method: SearchMethod::BruteForce,
                seed,
                ..SearchConfig::default()
            };
            let ga_config = SearchConfig {
                method: SearchMethod::Genetic,
                ..bf_config.clone()
            };
            let t = Instant::now();
            let bf = pruner::search(&pool, &bf_config)?;
            let bf_seconds = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let ga = pruner::search(&pool, &ga_config)?;
            let ga_seconds = t.elapsed().as_secs_f64();
            info!("N={n}: BF {bf_seconds:.3}s, GA {ga_seconds:.3}s");
            Ok(BenchRow {
                n,
                candidates: candidate_count(n),
                bf_seconds,
                ga_seconds,
                ga_visited: ga.visited_count,
                ga_coverage: ga.coverage(),
                ga_generations: ga.generations_run.unwrap_or(0),
                same_top1: bf.best().map(|d| d.mask) == ga.best().map(|d| d.mask),
            })
        })
        .collect()
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = String::from("| N | M | BF (s) | GA (s) | GA visited | GA coverage | same #1 |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {:.3} | {:.3} | {} | {:.1}% | {} |\n",
            r.n,
            r.candidates,
            r.bf_seconds,
            r.ga_seconds,
            r.ga_visited,
            100.0 * r.ga_coverage,
            if r.same_top1 { "yes" } else { "no" }
        ));
    }
    out
}

fn append_eval_row(path: &Path, summary: &EvalSummary) -> CliResult<()> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| CliError::Io { path: path.into(), source })?;
    let mut writer = csv::Writer::from_writer(file);
    if fresh {
        writer.write_record(["method", "split", "episodes", "accuracy", "ci95"])?;
    }
    writer.write_record([
        summary.method.clone(),
        summary.split.clone(),
        summary.episodes.to_string(),
        summary.accuracy.to_string(),
        summary.ci95.to_string(),
    ])?;
    writer.flush().map_err(|source| CliError::Io { path: path.into(), source })
}

/// Writes the CSV behind one plot kind and returns the number of data rows.
///
/// * `diversity_scatter`: `mask,m,lambda_focal,plurality_acc` per scored
///   candidate (all visited ones when recorded, else the ranked list).
/// * `stream_trace`: `batch,episodes,accuracy,ci95,best_member_accuracy`.
/// * `error_bars`: `method,split,episodes,accuracy,ci95` per evaluation.
pub fn export_plot_data(reports: &[RunReport], kind: ExportKind, path: &Path) -> CliResult<usize> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let header: &[&str] = match kind {
        ExportKind::DiversityScatter => &["mask", "m", "lambda_focal", "plurality_acc"],
        ExportKind::StreamTrace => &["batch", "episodes", "accuracy", "ci95", "best_member_accuracy"],
        ExportKind::ErrorBars => &["method", "split", "episodes", "accuracy", "ci95"],
    };
    for report in reports {
        match (kind, &report.output) {
            (ExportKind::DiversityScatter, Output::Search(result)) => {
                if result.ranked.is_empty() {
                    return Err(CliError::KindMismatch("search result has no ranked candidates".into()));
                }
                if result.visited.is_empty() {
                    rows.extend(result.ranked.iter().map(|d| {
                        vec![d.mask.to_string(), d.mask.size().to_string(), d.lambda_focal.to_string(), d.val_accuracy.to_string()]
                    }));
                } else {
                    rows.extend(result.visited.iter().map(|v| {
                        vec![v.mask.to_string(), v.size.to_string(), v.diversity.to_string(), v.accuracy.to_string()]
                    }));
                }
            }
            (ExportKind::StreamTrace, Output::Stream(trace)) => {
                rows.extend(trace.batches.iter().map(|b| {
                    vec![
                        b.batch.to_string(),
                        b.summary.episodes.to_string(),
                        b.summary.accuracy.to_string(),
                        b.summary.ci95.to_string(),
                        b.best_member_accuracy.to_string(),
                    ]
                }));
            }
            (ExportKind::ErrorBars, Output::Eval(s)) => rows.push(vec![
                s.method.clone(),
                s.split.clone(),
                s.episodes.to_string(),
                s.accuracy.to_string(),
                s.ci95.to_string(),
            ]),
            (_, other) => {
                let found = serde_json::to_value(other).ok().and_then(|v| v["kind"].as_str().map(String::from)).unwrap_or_default();
                return Err(CliError::KindMismatch(format!("{kind:?} cannot be built from a `{found}` report")));
            }
        }
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io { path: path.into(), source },
        other => CliError::Usage(format!("{other:?}")),
    })?;
    writer.write_record(header)?;
    for row in &rows {
        writer.write_record(row)?;
    }
    writer.flush().map_err(|source| CliError::Io { path: path.into(), source })?;
    Ok(rows.len())
}

/// Parses `argv` (including the program name), runs it and writes the
/// report. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let echo: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &echo).and_then(emit) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", single_line(&e.to_string()));
            e.exit_code()
        }
    }
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn emit(run: Run) -> CliResult<()> {
    if let Some(text) = run.text {
        print!("{text}");
        if let (Some(report), Some(path)) = (&run.report, &run.destination) {
            write_text(path, &report.to_json())?;
        }
        return Ok(());
    }
    if let Some(report) = run.report {
        match run.destination {
            Some(path) => write_text(&path, &report.to_json())?,
            None => print!("{}", report.to_json()),
        }
    }
    Ok(())
}
