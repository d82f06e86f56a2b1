//! The joint network and its single forward pass.
//!
//! One call to [`Model::forward`] encodes the document once and runs every
//! head on top: BIO tags, mention pooling, both typing heads, the pair stage
//! and (optionally) candidate scoring. [`Model::decode`] turns the tape values
//! into clusters, types, identifiers and triples without further passes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use docie_autodiff::checkpoint::{load_into, read_tensors, write_tensors};
use docie_autodiff::{Graph, NodeId, ParamStore};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{build_similarity, cluster, ClusteringConfig, SimilarityMatrix};
use crate::document::{
    build_candidate_table, CandidateTable, Document, EntityCluster, KnowledgeBase, MentionSpan, Schema, Triple,
};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::linking::{majority_vote_cluster_id, predict_ids, EdConfig, EntityLinker, EntityRecord, LinkGraph, LinkInputs};
use crate::mention::{decode_mentions, pool_mentions, MentionDetector};
use crate::relation::{aggregate_entity_relations, pair_scores, PairGraph, PairScore, Pruning, RcConfig, RelationModule};
use crate::typing::{aggregate_cluster_type, EntityTyper, TypeAggregation, TypeLogits};
use crate::vocab::{build_vocab, Vocabulary};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub rc: RcConfig,
    pub ed: EdConfig,
    pub type_aggregation: TypeAggregation,
    pub clustering: ClusteringConfig,
    /// Minimum corpus frequency for a token to enter the vocabulary.
    pub min_count: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.rc.validate()?;
        self.ed.validate()?;
        self.clustering.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MentionSource {
    /// Gold mention spans (teacher forcing and subtask evaluation).
    Gold,
    /// Spans decoded from the mention-detection head of the same pass.
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mentions: MentionSource,
    pub pruning: Pruning,
    /// Run candidate scoring. Off for relation extraction without linking.
    pub link: bool,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// The document as encoded, cut to the encoder limit when too long.
    pub doc: Document,
    pub truncated: bool,
    /// `[n_tokens, 3]`.
    pub md_logits: NodeId,
    pub mentions: Vec<MentionSpan>,
    /// Gold cluster of each mention; empty for predicted mentions.
    pub mention_cluster: Vec<usize>,
    /// `[n_mentions, dim]`, absent without mentions.
    pub mention_emb: Option<NodeId>,
    pub types: Option<TypeLogits>,
    pub pairs: PairGraph,
    pub links: Option<LinkGraph>,
}

/// How decoded mentions are grouped into entities.
#[derive(Debug, Clone, Copy)]
pub enum Grouping<'a> {
    /// Gold clusters; only valid for a pass over gold mentions. Cluster `c`
    /// of the output is cluster `c` of the document.
    Gold,
    Predict(&'a ClusteringConfig),
}

/// Everything extracted from one document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Extraction {
    pub mentions: Vec<MentionSpan>,
    pub pair_scores: Vec<PairScore>,
    /// Final-head type probabilities per mention.
    pub type_scores: Vec<Vec<f64>>,
    /// Best candidate per mention with its probability; empty without linking.
    pub mention_links: Vec<Option<(String, f64)>>,
    pub clusters: Vec<Vec<usize>>,
    pub cluster_types: Vec<BTreeSet<String>>,
    pub cluster_ids: Vec<Option<String>>,
    pub triples: Vec<Triple>,
}

impl Extraction {
    /// The extraction in corpus form, over the tokens of `doc`.
    pub fn to_document(&self, doc: &Document) -> Document {
        Document {
            id: doc.id.clone(),
            tokens: doc.tokens.clone(),
            clusters: self
                .clusters
                .iter()
                .zip(&self.cluster_types)
                .zip(&self.cluster_ids)
                .map(|((members, types), id)| EntityCluster {
                    mentions: members.iter().map(|&m| self.mentions[m]).collect(),
                    types: types.clone(),
                    entity_id: id.clone(),
                })
                .collect(),
            triples: self.triples.clone(),
            annotated: true,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    schema: Schema,
    vocab: Vocabulary,
    description_vocab: Vocabulary,
    kb: KnowledgeBase,
    candidates: CandidateTable,
    seed: u64,
}

const MAGIC: &[u8; 4] = b"DXCK";
const VERSION: u32 = 1;

pub struct Model {
    pub config: ModelConfig,
    pub schema: Schema,
    pub vocab: Vocabulary,
    pub description_vocab: Vocabulary,
    pub kb: KnowledgeBase,
    pub candidates: CandidateTable,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub md: MentionDetector,
    pub typer: EntityTyper,
    pub rc: RelationModule,
    pub linker: EntityLinker,
    seed: u64,
    records: BTreeMap<String, EntityRecord>,
    forward_passes: AtomicUsize,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.store.num_values())
            .finish_non_exhaustive()
    }
}

impl Model {
    /// Fresh weights drawn from `seed`.
    pub fn new(
        config: ModelConfig,
        schema: Schema,
        vocab: Vocabulary,
        description_vocab: Vocabulary,
        kb: KnowledgeBase,
        candidates: CandidateTable,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.encoder.embedding_dim;
        let encoder = Encoder::from_config(&mut store, vocab.len(), &config.encoder, &mut rng)?;
        let md = MentionDetector::new(&mut store, d, &mut rng)?;
        let typer = EntityTyper::new(&mut store, d, schema.entity_types.len(), schema.fine_types.len(), &mut rng)?;
        let rc = RelationModule::new(
            &mut store,
            d,
            schema.relations.len(),
            schema.fine_relations.len(),
            &config.rc,
            &mut rng,
        )?;
        let linker = EntityLinker::new(
            &mut store,
            d,
            schema.fine_relations.len(),
            description_vocab.len(),
            &config.ed,
            &mut rng,
        )?;
        let records = kb
            .iter()
            .map(|e| {
                let fine: Vec<usize> = e.fine_types.iter().filter_map(|f| schema.fine_type_index(f)).collect();
                let rec = EntityRecord::new(
                    &e.description,
                    &fine,
                    &description_vocab,
                    config.ed.description_tokens,
                    schema.fine_types.len(),
                );
                (e.entity_id.clone(), rec)
            })
            .collect();
        Ok(Self {
            config,
            schema,
            vocab,
            description_vocab,
            kb,
            candidates,
            store,
            encoder,
            md,
            typer,
            rc,
            linker,
            seed,
            records,
            forward_passes: AtomicUsize::new(0),
        })
    }

    /// Builds vocabularies and the candidate table from a training corpus.
    pub fn for_corpus(
        config: ModelConfig,
        schema: Schema,
        kb: KnowledgeBase,
        corpus: &[Document],
        seed: u64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let vocab = build_vocab(corpus, config.min_count.max(1));
        let description_vocab =
            Vocabulary::from_tokens(kb.iter().flat_map(|e| e.description.split_whitespace()), 1);
        let candidates = build_candidate_table(corpus, config.ed.max_candidates);
        Self::new(config, schema, vocab, description_vocab, kb, candidates, seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn options(&self, mentions: MentionSource, link: bool) -> ForwardOptions {
        ForwardOptions {
            mentions,
            pruning: Pruning::TopK(self.config.rc.top_k),
            link,
        }
    }

    /// Number of forward passes run since construction or the last reset.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    fn record(&self, id: &str) -> EntityRecord {
        self.records
            .get(id)
            .cloned()
            .unwrap_or_else(|| EntityRecord::unknown(self.schema.fine_types.len()))
    }

    pub fn forward(&self, g: &mut Graph, doc: &Document, opts: ForwardOptions) -> Result<ForwardOutput> {
        self.forward_with(&self.store, g, doc, opts)
    }

    /// [`Model::forward`] reading weights from `params`, a store laid out like
    /// `self.store` (finite-difference checks perturb a copy).
    pub fn forward_with(
        &self,
        params: &ParamStore,
        g: &mut Graph,
        doc: &Document,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let max = self.config.encoder.max_seq_len;
        let (doc, truncated) = match doc.truncated(max) {
            Some(cut) => {
                warn!("document {} has {} tokens; truncated to {max}", doc.id, doc.len());
                (cut, true)
            }
            None => (doc.clone(), false),
        };
        if doc.is_empty() {
            return Err(Error::validation(&doc.id, "document has no tokens"));
        }
        let ids = self.vocab.ids(&doc.tokens);
        let h = self.encoder.forward(g, params, &ids)?;
        let md_logits = self.md.forward(g, params, h)?;

        let (mentions, mention_cluster) = match opts.mentions {
            MentionSource::Gold => {
                if !doc.annotated {
                    return Err(Error::Config(format!(
                        "document {} has no annotation to supply gold mentions",
                        doc.id
                    )));
                }
                doc.gold_mentions().into_iter().unzip()
            }
            MentionSource::Predicted => (decode_mentions(g.value(md_logits)), Vec::new()),
        };
        let mut out = ForwardOutput {
            doc,
            truncated,
            md_logits,
            mentions,
            mention_cluster,
            mention_emb: None,
            types: None,
            pairs: PairGraph::default(),
            links: None,
        };
        if out.mentions.is_empty() {
            return Ok(out);
        }

        let m = pool_mentions(g, h, &out.mentions)?;
        let types = self.typer.forward(g, params, m)?;
        out.pairs = self.rc.forward(g, params, m, opts.pruning, opts.link)?;
        out.mention_emb = Some(m);
        out.types = Some(types);
        if opts.link {
            let candidates: Vec<_> = out
                .mentions
                .iter()
                .map(|s| self.candidates.lookup(&out.doc.surface(*s)).to_vec())
                .collect();
            let fine_types = g.sigmoid(types.ed_logits);
            let relation_context = match out.pairs.kg_logits {
                Some(kg) => {
                    let p = g.sigmoid(kg);
                    g.group_mean(p, &out.pairs.incident())?
                }
                None => g.zeros(out.mentions.len(), self.schema.fine_relations.len()),
            };
            let inputs = LinkInputs {
                mentions: m,
                fine_types,
                relation_context,
                candidates: &candidates,
            };
            out.links = Some(self.linker.forward(g, params, inputs, &|id| self.record(id))?);
        }
        Ok(out)
    }

    pub fn decode(&self, g: &Graph, out: &ForwardOutput, grouping: Grouping<'_>) -> Result<Extraction> {
        let n = out.mentions.len();
        let pair_scores = pair_scores(g, &out.pairs);
        let type_scores: Vec<Vec<f64>> = match out.types {
            Some(t) => {
                let k = self.schema.entity_types.len();
                g.value(t.final_logits)
                    .chunks(k)
                    .map(|row| row.iter().map(|z| docie_autodiff::sigmoid(*z)).collect())
                    .collect()
            }
            None => Vec::new(),
        };
        let mention_links = out.links.as_ref().map(|lg| predict_ids(g, lg)).unwrap_or_default();

        let clusters = match grouping {
            Grouping::Gold => {
                if out.mention_cluster.len() != n {
                    return Err(Error::Contract("gold grouping needs a pass over gold mentions".into()));
                }
                let mut groups = vec![Vec::new(); out.doc.clusters.len()];
                for (m, &c) in out.mention_cluster.iter().enumerate() {
                    groups[c].push(m);
                }
                groups
            }
            Grouping::Predict(cfg) => {
                let s: SimilarityMatrix = build_similarity(&pair_scores, n);
                let ids: Option<Vec<Option<String>>> = out
                    .links
                    .as_ref()
                    .map(|_| mention_links.iter().map(|l| l.as_ref().map(|(id, _)| id.clone())).collect());
                cluster(&s, cfg, ids.as_deref())?
            }
        };

        let cluster_types = clusters
            .iter()
            .map(|members| {
                let rows: Vec<&[f64]> = members.iter().map(|&m| type_scores[m].as_slice()).collect();
                Ok(aggregate_cluster_type(&rows, self.config.type_aggregation)?
                    .into_iter()
                    .map(|t| self.schema.entity_types[t].clone())
                    .collect())
            })
            .collect::<Result<Vec<BTreeSet<String>>>>()?;
        let cluster_ids = clusters
            .iter()
            .map(|members| {
                if mention_links.is_empty() {
                    return Ok(None);
                }
                let votes: Vec<_> = members.iter().map(|&m| mention_links[m].clone()).collect();
                majority_vote_cluster_id(&votes)
            })
            .collect::<Result<Vec<_>>>()?;
        let triples = aggregate_entity_relations(
            &pair_scores,
            &clusters,
            &self.schema.relations,
            self.config.rc.relation_threshold,
        );
        Ok(Extraction {
            mentions: out.mentions.clone(),
            pair_scores,
            type_scores,
            mention_links,
            clusters,
            cluster_types,
            cluster_ids,
            triples,
        })
    }

    /// Forward pass in evaluation mode followed by decoding.
    pub fn extract(&self, doc: &Document, opts: ForwardOptions, grouping: Grouping<'_>) -> Result<(Extraction, bool)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, doc, opts)?;
        Ok((self.decode(&g, &out, grouping)?, out.truncated))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck_err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            schema: self.schema.clone(),
            vocab: self.vocab.clone(),
            description_vocab: self.description_vocab.clone(),
            kb: self.kb.clone(),
            candidates: self.candidates.clone(),
            seed: self.seed,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| ck_err(e.to_string()))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)
        };
        write(&mut w).map_err(|e| Error::io(path, e))?;
        write_tensors(&mut w, &self.store).map_err(|e| ck_err(e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck_err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|e| ck_err(e.to_string()))?;
        if &header[..4] != MAGIC {
            return Err(ck_err("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ck_err(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes")) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|e| ck_err(e.to_string()))?;
        let meta: CheckpointMeta = serde_json::from_slice(&json).map_err(|e| ck_err(e.to_string()))?;
        let mut model = Self::new(
            meta.config,
            meta.schema,
            meta.vocab.reindex(),
            meta.description_vocab.reindex(),
            meta.kb,
            meta.candidates,
            meta.seed,
        )?;
        let tensors = read_tensors(&mut r).map_err(|e| ck_err(e.to_string()))?;
        load_into(&mut model.store, tensors).map_err(|e| ck_err(e.to_string()))?;
        Ok(model)
    }
}
