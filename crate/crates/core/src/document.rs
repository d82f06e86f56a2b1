//! Documents, schemas and corpus ingestion.
//!
//! A corpus is one JSON file holding an array of documents:
//!
//! ```json
//! [{"id": "d0",
//!   "tokens": ["Ada", "Park", "works", "for", "Acme", "."],
//!   "clusters": [{"mentions": [{"start": 0, "end": 2}], "types": ["PER"], "entity_id": "Q1"},
//!                {"mentions": [{"start": 4, "end": 5}], "types": ["ORG"], "entity_id": null}],
//!   "triples": [{"head": 0, "relation": "works_for", "tail": 1}]}]
//! ```
//!
//! `id`, `clusters`, `triples`, `types` and `entity_id` are optional. Unknown
//! fields are ignored, so extraction output can be read back as a corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub entity_types: Vec<String>,
    pub relations: Vec<String>,
    pub entities: Vec<String>,
    pub fine_types: Vec<String>,
    pub fine_relations: Vec<String>,
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("entity_types", &self.entity_types),
            ("relations", &self.relations),
            ("entities", &self.entities),
            ("fine_types", &self.fine_types),
            ("fine_relations", &self.fine_relations),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!("schema list {name} is empty")));
            }
            let mut seen = BTreeSet::new();
            if let Some(dup) = list.iter().find(|l| !seen.insert(l.as_str())) {
                return Err(Error::Config(format!("schema list {name} repeats label {dup}")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let schema: Schema = read_json(path.as_ref())?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn type_index(&self, label: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == label)
    }

    pub fn relation_index(&self, label: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == label)
    }

    pub fn fine_type_index(&self, label: &str) -> Option<usize> {
        self.fine_types.iter().position(|t| t == label)
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MentionSpan {
    pub start: usize,
    pub end: usize,
}

impl MentionSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &MentionSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EntityCluster {
    pub mentions: BTreeSet<MentionSpan>,
    #[serde(default)]
    pub types: BTreeSet<String>,
    #[serde(default)]
    pub entity_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: String,
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    pub clusters: Vec<EntityCluster>,
    pub triples: Vec<Triple>,
    /// False when the source carried no `clusters` field (raw text input).
    pub annotated: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawCluster {
    mentions: Vec<MentionSpan>,
    #[serde(default)]
    types: Vec<String>,
    #[serde(default)]
    entity_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clusters: Option<Vec<RawCluster>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    triples: Option<Vec<Triple>>,
}

impl Document {
    /// Unannotated document, e.g. inference input.
    pub fn from_tokens(id: impl Into<String>, tokens: Vec<String>) -> Self {
        Self {
            id: id.into(),
            tokens,
            clusters: Vec::new(),
            triples: Vec::new(),
            annotated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Surface string of a span: its tokens joined by single spaces.
    pub fn surface(&self, span: MentionSpan) -> String {
        self.tokens[span.start..span.end].join(" ")
    }

    /// All gold mentions sorted by position, each with its cluster index.
    pub fn gold_mentions(&self) -> Vec<(MentionSpan, usize)> {
        let mut out: Vec<_> = self
            .clusters
            .iter()
            .enumerate()
            .flat_map(|(c, cl)| cl.mentions.iter().map(move |m| (*m, c)))
            .collect();
        out.sort();
        out
    }

    /// Cuts the document to its first `max_len` tokens. Mentions crossing the
    /// cut are dropped, then clusters left empty and their triples. Returns
    /// `None` when nothing needs cutting.
    pub fn truncated(&self, max_len: usize) -> Option<Document> {
        if self.tokens.len() <= max_len {
            return None;
        }
        let mut doc = Document {
            id: self.id.clone(),
            tokens: self.tokens[..max_len].to_vec(),
            clusters: Vec::new(),
            triples: Vec::new(),
            annotated: self.annotated,
        };
        let mut remap = HashMap::new();
        for (i, c) in self.clusters.iter().enumerate() {
            let mentions: BTreeSet<_> = c.mentions.iter().copied().filter(|m| m.end <= max_len).collect();
            if mentions.is_empty() {
                continue;
            }
            remap.insert(i, doc.clusters.len());
            doc.clusters.push(EntityCluster {
                mentions,
                types: c.types.clone(),
                entity_id: c.entity_id.clone(),
            });
        }
        doc.triples = self
            .triples
            .iter()
            .filter_map(|t| {
                Some(Triple {
                    head: *remap.get(&t.head)?,
                    relation: t.relation.clone(),
                    tail: *remap.get(&t.tail)?,
                })
            })
            .collect();
        Some(doc)
    }

    fn from_raw(raw: RawDocument, index: usize, schema: &Schema) -> Result<Self> {
        let id = raw.id.unwrap_or_else(|| format!("#{index}"));
        let annotated = raw.clusters.is_some();
        let n = raw.tokens.len();
        let raw_clusters = raw.clusters.unwrap_or_default();

        let mut clusters = Vec::new();
        let mut remap: Vec<Option<usize>> = Vec::with_capacity(raw_clusters.len());
        for rc in raw_clusters {
            for span in &rc.mentions {
                if span.start >= span.end || span.end > n {
                    return Err(Error::validation(
                        &id,
                        format!(
                            "mention span [{}, {}) out of bounds for {n} tokens",
                            span.start, span.end
                        ),
                    ));
                }
            }
            for t in &rc.types {
                if schema.type_index(t).is_none() {
                    return Err(Error::SchemaMismatch(format!("document {id}: unknown entity type {t}")));
                }
            }
            if let Some(e) = &rc.entity_id {
                if !schema.entities.iter().any(|x| x == e) {
                    return Err(Error::SchemaMismatch(format!("document {id}: unknown entity id {e}")));
                }
            }
            if rc.mentions.is_empty() {
                remap.push(None);
                continue;
            }
            remap.push(Some(clusters.len()));
            clusters.push(EntityCluster {
                mentions: rc.mentions.into_iter().collect(),
                types: rc.types.into_iter().collect(),
                entity_id: rc.entity_id,
            });
        }

        let mut triples = Vec::new();
        let mut seen = BTreeSet::new();
        for t in raw.triples.unwrap_or_default() {
            if schema.relation_index(&t.relation).is_none() {
                return Err(Error::SchemaMismatch(format!(
                    "document {id}: unknown relation {}",
                    t.relation
                )));
            }
            let lookup = |c: usize| {
                remap.get(c).copied().ok_or_else(|| {
                    Error::validation(&id, format!("triple references missing cluster {c}"))
                })
            };
            let (Some(head), Some(tail)) = (lookup(t.head)?, lookup(t.tail)?) else {
                continue;
            };
            if head == tail {
                return Err(Error::validation(
                    &id,
                    format!("triple {} links cluster {} to itself", t.relation, t.head),
                ));
            }
            let triple = Triple {
                head,
                relation: t.relation,
                tail,
            };
            if seen.insert(triple.clone()) {
                triples.push(triple);
            }
        }

        let doc = Document {
            id,
            tokens: raw.tokens,
            clusters,
            triples,
            annotated,
        };
        doc.check_overlaps()?;
        Ok(doc)
    }

    /// Gold mentions may not overlap or repeat across clusters: BIO tags
    /// cannot express nesting.
    pub fn check_overlaps(&self) -> Result<()> {
        let mentions = self.gold_mentions();
        for w in mentions.windows(2) {
            let ((a, ca), (b, cb)) = (w[0], w[1]);
            if a.overlaps(&b) {
                return Err(Error::validation(
                    &self.id,
                    format!(
                        "overlapping mentions [{}, {}) in cluster {ca} and [{}, {}) in cluster {cb}",
                        a.start, a.end, b.start, b.end
                    ),
                ));
            }
        }
        Ok(())
    }

    fn to_raw(&self) -> RawDocument {
        RawDocument {
            id: Some(self.id.clone()),
            tokens: self.tokens.clone(),
            clusters: self.annotated.then(|| {
                self.clusters
                    .iter()
                    .map(|c| RawCluster {
                        mentions: c.mentions.iter().copied().collect(),
                        types: c.types.iter().cloned().collect(),
                        entity_id: c.entity_id.clone(),
                    })
                    .collect()
            }),
            triples: self.annotated.then(|| self.triples.clone()),
        }
    }
}

impl Serialize for Document {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_raw().serialize(serializer)
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads and validates a corpus file. Empty clusters are dropped together with
/// their triples, and duplicate triples collapse to one.
pub fn parse_corpus(path: impl AsRef<Path>, schema: &Schema) -> Result<Vec<Document>> {
    let raw: Vec<RawDocument> = read_json(path.as_ref())?;
    parse_documents(raw, schema)
}

/// Same as [`parse_corpus`] for JSON already in memory.
pub fn parse_corpus_str(text: &str, schema: &Schema) -> Result<Vec<Document>> {
    let raw: Vec<RawDocument> = serde_json::from_str(text).map_err(|source| Error::Json {
        path: "<memory>".into(),
        source,
    })?;
    parse_documents(raw, schema)
}

fn parse_documents(raw: Vec<RawDocument>, schema: &Schema) -> Result<Vec<Document>> {
    raw.into_iter()
        .enumerate()
        .map(|(i, d)| Document::from_raw(d, i, schema))
        .collect()
}

pub fn corpus_to_json(docs: &[Document]) -> String {
    serde_json::to_string_pretty(docs).expect("documents always serialize")
}

pub fn write_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    write_text(path.as_ref(), &corpus_to_json(docs))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One knowledge-base record: identifier, description text and fine types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbEntity {
    pub entity_id: String,
    pub description: String,
    #[serde(default)]
    pub fine_types: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    entities: BTreeMap<String, KbEntity>,
}

impl KnowledgeBase {
    pub fn new(entities: impl IntoIterator<Item = KbEntity>) -> Self {
        Self {
            entities: entities.into_iter().map(|e| (e.entity_id.clone(), e)).collect(),
        }
    }

    /// Reads a JSON array of `{entity_id, description, fine_types}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let list: Vec<KbEntity> = read_json(path.as_ref())?;
        Ok(Self::new(list))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let list: Vec<_> = self.entities.values().collect();
        write_text(
            path.as_ref(),
            &serde_json::to_string_pretty(&list).expect("kb always serializes"),
        )
    }

    pub fn get(&self, id: &str) -> Option<&KbEntity> {
        self.entities.get(id)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KbEntity> {
        self.entities.values()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity_id: String,
    pub prior: f64,
}

/// Mention surface to candidate entities ranked by the link prior P(e | m).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateTable {
    pub max_candidates: usize,
    entries: BTreeMap<String, Vec<Candidate>>,
}

impl CandidateTable {
    pub fn lookup(&self, surface: &str) -> &[Candidate] {
        self.entries.get(surface).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Candidate])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Link-count statistics over gold mentions: the prior of `e` for surface `m`
/// is the fraction of linked occurrences of `m` that point to `e`. Lists are
/// sorted by descending prior (ties by id) and truncated after the priors are
/// computed.
pub fn build_candidate_table(corpus: &[Document], max_candidates: usize) -> CandidateTable {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for doc in corpus {
        for c in &doc.clusters {
            let Some(id) = &c.entity_id else { continue };
            for m in &c.mentions {
                *counts
                    .entry(doc.surface(*m))
                    .or_default()
                    .entry(id.clone())
                    .or_default() += 1;
            }
        }
    }
    let entries = counts
        .into_iter()
        .map(|(surface, per_entity)| {
            let total: usize = per_entity.values().sum();
            let mut list: Vec<Candidate> = per_entity
                .into_iter()
                .map(|(entity_id, n)| Candidate {
                    entity_id,
                    prior: n as f64 / total as f64,
                })
                .collect();
            list.sort_by(|a, b| b.prior.total_cmp(&a.prior).then_with(|| a.entity_id.cmp(&b.entity_id)));
            list.truncate(max_candidates);
            (surface, list)
        })
        .collect();
    CandidateTable {
        max_candidates,
        entries,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub docs: usize,
    pub entities_per_doc: f64,
    pub facts_per_doc: f64,
    pub mentions_per_entity: f64,
    /// Distinct entity type labels in use.
    pub entity_types: usize,
    /// Distinct relation labels in use.
    pub relations: usize,
}

pub fn corpus_stats(corpus: &[Document]) -> CorpusStats {
    let docs = corpus.len();
    let entities: usize = corpus.iter().map(|d| d.clusters.len()).sum();
    let facts: usize = corpus.iter().map(|d| d.triples.len()).sum();
    let mentions: usize = corpus
        .iter()
        .flat_map(|d| &d.clusters)
        .map(|c| c.mentions.len())
        .sum();
    let types: BTreeSet<&str> = corpus
        .iter()
        .flat_map(|d| &d.clusters)
        .flat_map(|c| c.types.iter().map(String::as_str))
        .collect();
    let relations: BTreeSet<&str> = corpus
        .iter()
        .flat_map(|d| &d.triples)
        .map(|t| t.relation.as_str())
        .collect();
    let per = |x: usize, n: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    CorpusStats {
        docs,
        entities_per_doc: per(entities, docs),
        facts_per_doc: per(facts, docs),
        mentions_per_entity: per(mentions, entities),
        entity_types: types.len(),
        relations: relations.len(),
    }
}
