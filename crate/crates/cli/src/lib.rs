//! The `docie` command line: train, eval, infer, bench and generate.
//!
//! Every command is a plain function over parsed arguments so tests can run
//! them in-process; `main` only parses, dispatches and maps errors to exit
//! codes.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use docie_autodiff::Graph;
use docie_core::clustering::{ClusteringConfig, ClusteringMethod};
use docie_core::document::{parse_corpus, write_corpus, Document, EntityCluster, MentionSpan, Triple};
use docie_core::eval::{evaluate_model, EvalReport};
use docie_core::model::{Grouping, MentionSource, Model};
use docie_core::synthetic::{generate_synthetic_corpus, synthetic_kb, synthetic_schema};
use docie_core::training::{train, TrainConfig, TrainingMode};
use docie_core::{Error, Result};
use serde::Serialize;

/// JSON Schema of `docie infer` output.
pub const INFERENCE_SCHEMA: &str = include_str!("../schemas/inference-output.schema.json");

#[derive(Debug, Parser)]
#[command(name = "docie", version, about = "Joint document-level closed information extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON config; writes best.ckpt and metrics.jsonl.
    Train(TrainArgs),
    /// Score a checkpoint on an annotated corpus.
    Eval(EvalArgs),
    /// Extract from raw documents, one forward pass each.
    Infer(InferArgs),
    /// Time inference over a corpus.
    Bench(BenchArgs),
    /// Write the synthetic schema, knowledge base and a corpus.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct ClusteringArgs {
    /// Coreference clustering method; the checkpoint's when absent.
    #[arg(long)]
    pub method: Option<ClusteringMethod>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

impl ClusteringArgs {
    fn apply(&self, model: &mut Model) -> Result<()> {
        let current = model.config.clustering;
        let cfg = ClusteringConfig {
            method: self.method.unwrap_or(current.method),
            threshold: self.threshold.unwrap_or(current.threshold),
        };
        cfg.validate()?;
        model.config.clustering = cfg;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// subtask:<md|et|ed|coref|rc>, re or docie.
    #[arg(long, default_value = "docie")]
    pub mode: TrainingMode,
    #[command(flatten)]
    pub clustering: ClusteringArgs,
    #[arg(long, value_enum, default_value = "json")]
    pub format: ReportFormat,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// The two end-to-end settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum E2eMode {
    /// Relation extraction without disambiguation.
    Re,
    Docie,
}

impl E2eMode {
    fn links(self) -> bool {
        self == E2eMode::Docie
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "docie")]
    pub mode: E2eMode,
    #[command(flatten)]
    pub clustering: ClusteringArgs,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "docie")]
    pub mode: E2eMode,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub docs: usize,
    /// Directory receiving schema.json, kb.json and corpus.json.
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit status for an error: 2 for configuration and input problems,
/// 3 for divergence, 4 for schema mismatch, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Io { .. } | Error::Json { .. } | Error::Validation { .. } | Error::Checkpoint { .. } => 2,
        Error::Divergence { .. } => 3,
        Error::SchemaMismatch(_) => 4,
        _ => 1,
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            if let Some(path) = &a.out {
                write_file(path, &report.to_json())?;
            }
            match a.format {
                ReportFormat::Json => emit(out, &report.to_json()),
                ReportFormat::Table => emit(out, report.to_table().trim_end()),
            }
        }
        Command::Infer(a) => {
            let result = cmd_infer(&a)?;
            let json = to_json(&result.documents);
            match &a.out {
                Some(path) => {
                    write_file(path, &json)?;
                    emit(out, &to_json(&result.summary()))
                }
                None => emit(out, &json),
            }
        }
        Command::Bench(a) => {
            let report = cmd_bench(&a)?;
            let json = to_json(&report);
            if let Some(path) = &a.out {
                write_file(path, &json)?;
            }
            emit(out, &json)
        }
        Command::Generate(a) => cmd_generate(&a, out),
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    mode: String,
    epochs_run: usize,
    best_epoch: usize,
    best_score: Option<f64>,
    checkpoint: PathBuf,
    metrics: PathBuf,
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    if !args.config.is_file() {
        return Err(Error::Config(format!("config file {} not found", args.config.display())));
    }
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.out {
        cfg.paths.output_dir = dir.clone();
    }
    let (outcome, artifacts) = train(&cfg)?;
    emit(
        out,
        &to_json(&TrainSummary {
            mode: cfg.mode.to_string(),
            epochs_run: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            best_score: outcome.best_score,
            checkpoint: artifacts.checkpoint,
            metrics: artifacts.metrics,
        }),
    )
}

fn load_model(path: &Path, clustering: &ClusteringArgs) -> Result<Model> {
    let mut model = Model::load(path)?;
    clustering.apply(&mut model)?;
    Ok(model)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let model = load_model(&args.checkpoint, &args.clustering)?;
    let docs = parse_corpus(&args.corpus, &model.schema)?;
    evaluate_model(&model, &docs, args.mode)
}

/// Inference record of one document: the ingestion format plus the mention
/// list and pass metadata.
#[derive(Debug, Clone, Serialize)]
pub struct InferredDocument {
    pub id: String,
    pub tokens: Vec<String>,
    pub mentions: Vec<MentionSpan>,
    pub clusters: Vec<InferredCluster>,
    pub triples: Vec<Triple>,
    pub metadata: DocMetadata,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferredCluster {
    pub mentions: Vec<MentionSpan>,
    pub types: Vec<String>,
    pub entity_id: Option<String>,
}

impl From<&EntityCluster> for InferredCluster {
    fn from(c: &EntityCluster) -> Self {
        Self {
            mentions: c.mentions.iter().copied().collect(),
            types: c.types.iter().cloned().collect(),
            entity_id: c.entity_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DocMetadata {
    pub truncated: bool,
    /// Tokens actually encoded.
    pub encoded_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug)]
pub struct InferResult {
    pub documents: Vec<InferredDocument>,
    pub forward_passes: usize,
}

#[derive(Debug, Serialize)]
pub struct InferSummary {
    pub documents: usize,
    pub forward_passes: usize,
    pub truncated: Vec<String>,
}

impl InferResult {
    pub fn summary(&self) -> InferSummary {
        InferSummary {
            documents: self.documents.len(),
            forward_passes: self.forward_passes,
            truncated: self.documents.iter().filter(|d| d.metadata.truncated).map(|d| d.id.clone()).collect(),
        }
    }
}

/// One forward pass per document, predicted mentions throughout.
pub fn infer_documents(model: &Model, docs: &[Document], mode: E2eMode) -> Result<InferResult> {
    model.reset_forward_passes();
    let opts = model.options(MentionSource::Predicted, mode.links());
    let mut documents = Vec::with_capacity(docs.len());
    for doc in docs {
        let mut g = Graph::new();
        let out = model.forward(&mut g, doc, opts)?;
        let extraction = model.decode(&g, &out, Grouping::Predict(&model.config.clustering))?;
        let predicted = extraction.to_document(doc);
        let warning = out.truncated.then(|| {
            format!(
                "document has {} tokens; only the first {} were encoded",
                doc.len(),
                out.doc.len()
            )
        });
        documents.push(InferredDocument {
            id: doc.id.clone(),
            tokens: doc.tokens.clone(),
            mentions: extraction.mentions.clone(),
            clusters: predicted.clusters.iter().map(InferredCluster::from).collect(),
            triples: predicted.triples,
            metadata: DocMetadata {
                truncated: out.truncated,
                encoded_tokens: out.doc.len(),
                warning,
            },
        });
    }
    Ok(InferResult {
        documents,
        forward_passes: model.forward_passes(),
    })
}

pub fn cmd_infer(args: &InferArgs) -> Result<InferResult> {
    let model = load_model(&args.checkpoint, &args.clustering)?;
    let docs = parse_corpus(&args.corpus, &model.schema)?;
    infer_documents(&model, &docs, args.mode)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub corpus: String,
    pub n_docs: usize,
    pub mode: E2eMode,
    pub repeats: usize,
    /// Median over repeats of the wall-clock time of one pass over the corpus.
    pub total_seconds: f64,
    pub seconds_per_doc: f64,
    /// Sum over documents of the fastest time seen for that document.
    pub per_doc_min_seconds: f64,
    pub hardware: String,
}

fn hardware() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {} {}; {threads} hardware threads; single-threaded run", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times forward pass plus decoding per document, after one untimed warmup
/// pass over the corpus.
pub fn bench_model(model: &Model, docs: &[Document], corpus: &str, mode: E2eMode, repeats: usize) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if docs.is_empty() {
        return Err(Error::Config("benchmark corpus is empty".into()));
    }
    let opts = model.options(MentionSource::Predicted, mode.links());
    let clustering = model.config.clustering;
    let run_one = |doc: &Document| -> Result<()> {
        let mut g = Graph::new();
        let out = model.forward(&mut g, doc, opts)?;
        model.decode(&g, &out, Grouping::Predict(&clustering))?;
        Ok(())
    };
    for doc in docs {
        run_one(doc)?;
    }
    let mut totals = Vec::with_capacity(repeats);
    let mut per_doc_min = vec![f64::INFINITY; docs.len()];
    for _ in 0..repeats {
        let start = Instant::now();
        for (i, doc) in docs.iter().enumerate() {
            let t = Instant::now();
            run_one(doc)?;
            per_doc_min[i] = per_doc_min[i].min(t.elapsed().as_secs_f64());
        }
        totals.push(start.elapsed().as_secs_f64());
    }
    totals.sort_by(f64::total_cmp);
    let total = totals[totals.len() / 2];
    Ok(BenchReport {
        corpus: corpus.to_string(),
        n_docs: docs.len(),
        mode,
        repeats,
        total_seconds: total,
        seconds_per_doc: total / docs.len() as f64,
        per_doc_min_seconds: per_doc_min.iter().sum(),
        hardware: hardware(),
    })
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchReport> {
    let model = Model::load(&args.checkpoint)?;
    let docs = parse_corpus(&args.corpus, &model.schema)?;
    let name = args
        .corpus
        .file_stem()
        .map_or_else(|| args.corpus.display().to_string(), |s| s.to_string_lossy().into_owned());
    bench_model(&model, &docs, &name, args.mode, args.repeats)
}

pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let schema = synthetic_schema();
    let docs = generate_synthetic_corpus(args.seed, args.docs, &schema)?;
    write_file(&args.out.join("schema.json"), &to_json(&schema))?;
    synthetic_kb().save(args.out.join("kb.json"))?;
    write_corpus(args.out.join("corpus.json"), &docs)?;
    emit(out, &format!("wrote {} documents to {}", docs.len(), args.out.display()))
}
