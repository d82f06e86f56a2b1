//! Weighted multi-task objective, training modes and the epoch loop.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use docie_autodiff::optim::{adam_step, OptimizerState};
use docie_autodiff::{Graph, NodeId};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bio::bio_encode;
use crate::document::{parse_corpus, Document, KnowledgeBase, MentionSpan, Schema};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::model::{ForwardOutput, MentionSource, Model, ModelConfig};
use crate::relation::PairLabels;

/// Weights of the five task losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub md: f64,
    pub et: f64,
    pub ed: f64,
    pub coref: f64,
    pub rc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            md: 0.1,
            et: 0.005,
            ed: 0.1,
            coref: 0.02,
            rc: 0.775,
        }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self {
        md: 0.0,
        et: 0.0,
        ed: 0.0,
        coref: 0.0,
        rc: 0.0,
    };

    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Md => self.md,
            Task::Et => self.et,
            Task::Ed => self.ed,
            Task::Coref => self.coref,
            Task::Rc => self.rc,
        }
    }

    fn slot(&mut self, task: Task) -> &mut f64 {
        match task {
            Task::Md => &mut self.md,
            Task::Et => &mut self.et,
            Task::Ed => &mut self.ed,
            Task::Coref => &mut self.coref,
            Task::Rc => &mut self.rc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for task in Task::ALL {
            let w = self.get(task);
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight for {task} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Md,
    Et,
    Ed,
    Coref,
    Rc,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Md, Task::Et, Task::Ed, Task::Coref, Task::Rc];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Md => "md",
            Task::Et => "et",
            Task::Ed => "ed",
            Task::Coref => "coref",
            Task::Rc => "rc",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "md" => Ok(Task::Md),
            "et" => Ok(Task::Et),
            "ed" => Ok(Task::Ed),
            "coref" => Ok(Task::Coref),
            "rc" => Ok(Task::Rc),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// `subtask:<task>`, `re` or `docie`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TrainingMode {
    Subtask(Task),
    /// Everything except disambiguation.
    Re,
    #[default]
    DocIe,
}

impl TrainingMode {
    /// Whether the mode scores candidates at all.
    pub fn links(self) -> bool {
        matches!(self, TrainingMode::DocIe | TrainingMode::Subtask(Task::Ed))
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainingMode::Subtask(t) => write!(f, "subtask:{t}"),
            TrainingMode::Re => f.write_str("re"),
            TrainingMode::DocIe => f.write_str("docie"),
        }
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "re" => Ok(TrainingMode::Re),
            "docie" => Ok(TrainingMode::DocIe),
            _ => match lower.strip_prefix("subtask:") {
                Some(task) => Ok(TrainingMode::Subtask(task.parse()?)),
                None => Err(Error::Config(format!(
                    "unknown mode {s:?}; expected subtask:<md|et|ed|coref|rc>, re or docie"
                ))),
            },
        }
    }
}

impl TryFrom<String> for TrainingMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TrainingMode> for String {
    fn from(m: TrainingMode) -> String {
        m.to_string()
    }
}

pub fn effective_weights(mode: TrainingMode, base: LossWeights) -> LossWeights {
    match mode {
        TrainingMode::Subtask(t) => {
            let mut w = LossWeights::ZERO;
            *w.slot(t) = base.get(t);
            w
        }
        TrainingMode::Re => LossWeights { ed: 0.0, ..base },
        TrainingMode::DocIe => base,
    }
}

/// Per-task loss nodes of one document; `None` when a term is switched off or
/// has nothing to score.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub md: Option<NodeId>,
    pub et: Option<NodeId>,
    pub ed: Option<NodeId>,
    pub coref: Option<NodeId>,
    pub rc: Option<NodeId>,
}

impl LossTerms {
    pub fn get(&self, task: Task) -> Option<NodeId> {
        match task {
            Task::Md => self.md,
            Task::Et => self.et,
            Task::Ed => self.ed,
            Task::Coref => self.coref,
            Task::Rc => self.rc,
        }
    }
}

/// The weighted sum of the present terms, or `None` when nothing contributes.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, weights: &LossWeights) -> Option<NodeId> {
    let mut total: Option<NodeId> = None;
    for task in Task::ALL {
        let w = weights.get(task);
        let Some(l) = terms.get(task).filter(|_| w > 0.0) else {
            continue;
        };
        let scaled = g.scale(l, w);
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled).expect("scalar losses"),
        });
    }
    total
}

/// Loss terms for a forward pass over gold mentions. Terms with zero weight
/// are not built, so their heads see no gradient.
pub fn task_losses(model: &Model, g: &mut Graph, out: &ForwardOutput, weights: &LossWeights) -> Result<LossTerms> {
    let doc = &out.doc;
    let mut terms = LossTerms::default();
    if weights.md > 0.0 {
        let spans: Vec<MentionSpan> = doc.gold_mentions().into_iter().map(|(s, _)| s).collect();
        let labels = bio_encode(&spans, doc.len())?;
        terms.md = Some(model.md.loss(g, out.md_logits, &labels)?);
    }
    if out.mention_cluster.len() != out.mentions.len() || out.mentions.is_empty() {
        return Ok(terms);
    }
    if weights.et > 0.0 {
        if let Some(types) = &out.types {
            let gold: Vec<BTreeSet<usize>> = out
                .mention_cluster
                .iter()
                .map(|&c| doc.clusters[c].types.iter().filter_map(|t| model.schema.type_index(t)).collect())
                .collect();
            terms.et = Some(model.typer.loss(g, types, &gold)?);
        }
    }
    if weights.coref > 0.0 || weights.rc > 0.0 {
        let triples: Vec<(usize, usize, usize)> = doc
            .triples
            .iter()
            .filter_map(|t| Some((t.head, model.schema.relation_index(&t.relation)?, t.tail)))
            .collect();
        let labels = PairLabels::new(out.mention_cluster.clone(), triples);
        if weights.coref > 0.0 {
            terms.coref = model.rc.coref_loss(g, &out.pairs, &labels)?;
        }
        if weights.rc > 0.0 {
            terms.rc = model.rc.relation_loss(g, &out.pairs, &labels)?;
        }
    }
    if weights.ed > 0.0 {
        if let Some(links) = &out.links {
            let gold: Vec<Option<String>> = out
                .mention_cluster
                .iter()
                .map(|&c| doc.clusters[c].entity_id.clone())
                .collect();
            terms.ed = model.linker.loss(g, links, &gold)?;
        }
    }
    Ok(terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Which report sections a pass feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Section {
    Md,
    Et,
    Ner,
    Ed,
    Coref,
    Rc,
    E2e,
}

/// One forward pass over a document and what it is used for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pass {
    pub mentions: MentionSource,
    pub link: bool,
    pub sections: Vec<Section>,
}

/// Upstream inputs per mode. Training is teacher-forced; subtask evaluation
/// takes gold mentions and clusters; end-to-end evaluation adds a fully
/// predicted pass.
pub fn route_inputs(mode: TrainingMode, phase: Phase, doc: &Document) -> Result<Vec<Pass>> {
    if !doc.annotated {
        return Err(Error::Config(format!(
            "document {} has no gold annotation, required for {} in mode {mode}",
            doc.id,
            match phase {
                Phase::Train => "training",
                Phase::Eval => "evaluation",
            }
        )));
    }
    let link = mode.links();
    let gold = |sections: Vec<Section>| Pass {
        mentions: MentionSource::Gold,
        link,
        sections,
    };
    let predicted = |sections: Vec<Section>| Pass {
        mentions: MentionSource::Predicted,
        link,
        sections,
    };
    Ok(match (phase, mode) {
        (Phase::Train, _) => vec![gold(Vec::new())],
        (Phase::Eval, TrainingMode::Subtask(Task::Md)) => vec![predicted(vec![Section::Md])],
        (Phase::Eval, TrainingMode::Subtask(Task::Et)) => vec![gold(vec![Section::Et])],
        (Phase::Eval, TrainingMode::Subtask(Task::Ed)) => vec![gold(vec![Section::Ed])],
        (Phase::Eval, TrainingMode::Subtask(Task::Coref)) => vec![gold(vec![Section::Coref])],
        (Phase::Eval, TrainingMode::Subtask(Task::Rc)) => vec![gold(vec![Section::Rc])],
        (Phase::Eval, TrainingMode::Re) => vec![
            gold(vec![Section::Et, Section::Coref, Section::Rc]),
            predicted(vec![Section::Md, Section::Ner, Section::E2e]),
        ],
        (Phase::Eval, TrainingMode::DocIe) => vec![
            gold(vec![Section::Et, Section::Ed, Section::Coref, Section::Rc]),
            predicted(vec![Section::Md, Section::Ner, Section::E2e]),
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPaths {
    pub schema: PathBuf,
    pub kb: PathBuf,
    pub train: PathBuf,
    /// Selection corpus; the training corpus when absent.
    pub dev: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for TrainPaths {
    fn default() -> Self {
        Self {
            schema: "schema.json".into(),
            kb: "kb.json".into(),
            train: "train.json".into(),
            dev: None,
            output_dir: "run".into(),
        }
    }
}

impl TrainPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.schema, &mut self.kb, &mut self.train, &mut self.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(dev) = self.dev.as_mut().filter(|d| d.is_relative()) {
            *dev = base.join(&*dev);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Evaluate on the selection corpus every this many epochs; 0 disables
    /// selection and keeps the last epoch.
    pub eval_every: usize,
    /// Stop once the selection score reaches this value.
    pub stop_at: Option<f64>,
    pub paths: TrainPaths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::DocIe,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            seed: 42,
            epochs: 150,
            batch_size: 2,
            learning_rate: 5e-5,
            eval_every: 1,
            stop_at: None,
            paths: TrainPaths::default(),
        }
    }
}

impl TrainConfig {
    /// Reads a JSON config; relative paths are taken from the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: TrainConfig = crate::document::read_json(path)?;
        cfg.paths.resolve(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Mean weighted total over documents.
    pub loss: f64,
    /// Mean unweighted term per task, over documents where it was built.
    pub terms: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// The score used for checkpoint selection: end-to-end hard F1 in the joint
/// modes, the task F1 for subtask training.
pub fn selection_score(mode: TrainingMode, report: &EvalReport) -> f64 {
    let f1 = |m: &Option<crate::eval::Prf>| m.as_ref().map_or(0.0, |p| p.f1);
    match mode {
        TrainingMode::Subtask(Task::Md) => f1(&report.md),
        TrainingMode::Subtask(Task::Et) => f1(&report.et),
        TrainingMode::Subtask(Task::Ed) => f1(&report.ed),
        TrainingMode::Subtask(Task::Coref) => report.coref.as_ref().map_or(0.0, |c| c.hard.f1),
        TrainingMode::Subtask(Task::Rc) => f1(&report.rc),
        TrainingMode::Re => report.e2e.as_ref().map_or(0.0, |e| e.re_hard.f1),
        TrainingMode::DocIe => report
            .e2e
            .as_ref()
            .and_then(|e| e.docie_hard.as_ref())
            .map_or(0.0, |p| p.f1),
    }
}

/// Dropout seed of one document step.
fn step_seed(seed: u64, epoch: usize, doc: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (doc as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Trains `model` in place on `train`. Each epoch appends one JSON line to
/// `log` when given; the best model by selection score is written to
/// `checkpoint` when given.
pub fn train_model(
    mut model: Model,
    train: &[Document],
    dev: Option<&[Document]>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let weights = effective_weights(cfg.mode, cfg.weights);
    let passes: Vec<Pass> = train
        .iter()
        .map(|d| route_inputs(cfg.mode, Phase::Train, d).map(|mut p| p.remove(0)))
        .collect::<Result<_>>()?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = OptimizerState::new(&model.store, cfg.learning_rate, steps_per_epoch * cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let selection = dev.unwrap_or(train);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = opt.current_lr();
        let mut loss_sum = 0.0;
        let mut term_sums = [(0.0, 0usize); 5];
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = opt.step_count();
            for &i in batch {
                let doc = &train[i];
                let pass = &passes[i];
                let mut g = Graph::training(step_seed(cfg.seed, epoch, i));
                let out = model.forward(&mut g, doc, model.options(pass.mentions, pass.link))?;
                let terms = task_losses(&model, &mut g, &out, &weights)?;
                for (k, task) in Task::ALL.into_iter().enumerate() {
                    if let Some(l) = terms.get(task) {
                        let v = g.scalar(l);
                        if !v.is_finite() {
                            return Err(Error::Divergence {
                                term: task.to_string(),
                                epoch,
                                step,
                                value: v,
                            });
                        }
                        term_sums[k].0 += v;
                        term_sums[k].1 += 1;
                    }
                }
                let Some(total) = total_loss(&mut g, &terms, &weights) else {
                    continue;
                };
                loss_sum += g.scalar(total);
                let grads = g.backward(total)?;
                model.store.accumulate(&grads, 1.0 / batch.len() as f64);
            }
            adam_step(&mut opt, &mut model.store);
            log::debug!("epoch {epoch} batch {b} done");
        }

        let mut record = EpochRecord {
            epoch,
            steps: opt.step_count(),
            learning_rate: lr,
            loss: loss_sum / train.len() as f64,
            terms: Task::ALL
                .into_iter()
                .zip(term_sums)
                .filter(|(_, (_, n))| *n > 0)
                .map(|(t, (s, n))| (t.to_string(), s / n as f64))
                .collect(),
            selection_score: None,
            eval: None,
        };
        let evaluate = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let mut stop = false;
        if evaluate {
            let report = evaluate_model(&model, selection, cfg.mode)?;
            let score = selection_score(cfg.mode, &report);
            info!("epoch {epoch}: loss {:.5}, selection {score:.4}", record.loss);
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, epoch));
                if let Some(path) = checkpoint {
                    model.save(path)?;
                }
            }
            stop = cfg.stop_at.is_some_and(|t| score >= t);
            record.selection_score = Some(score);
            record.eval = Some(report);
        } else {
            info!("epoch {epoch}: loss {:.5}", record.loss);
        }
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
        }
        history.push(record);
        if stop {
            break;
        }
    }

    let (best_score, best_epoch) = match best {
        Some((s, e)) => (Some(s), e),
        None => {
            if let Some(path) = checkpoint {
                model.save(path)?;
            }
            (None, history.len())
        }
    };
    let model = match (best_epoch != history.len(), checkpoint) {
        (true, Some(path)) => Model::load(path)?,
        _ => model,
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_score,
        history,
    })
}

/// Everything `train` writes.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Loads the files named by `cfg`, trains and writes `best.ckpt` and
/// `metrics.jsonl` into the output directory.
pub fn train(cfg: &TrainConfig) -> Result<(TrainOutcome, TrainArtifacts)> {
    cfg.validate()?;
    let schema = Schema::load(&cfg.paths.schema)?;
    let kb = KnowledgeBase::load(&cfg.paths.kb)?;
    let train_docs = parse_corpus(&cfg.paths.train, &schema)?;
    let dev_docs = cfg.paths.dev.as_ref().map(|p| parse_corpus(p, &schema)).transpose()?;
    let dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let artifacts = TrainArtifacts {
        checkpoint: dir.join("best.ckpt"),
        metrics: dir.join("metrics.jsonl"),
    };
    let model = Model::for_corpus(cfg.model.clone(), schema, kb, &train_docs, cfg.seed)?;
    let file = File::create(&artifacts.metrics).map_err(|e| Error::io(&artifacts.metrics, e))?;
    let mut log = BufWriter::new(file);
    let outcome = train_model(
        model,
        &train_docs,
        dev_docs.as_deref(),
        cfg,
        Some(&mut log),
        Some(&artifacts.checkpoint),
    )?;
    log.flush().map_err(|e| Error::io(&artifacts.metrics, e))?;
    Ok((outcome, artifacts))
}
