//! Entity disambiguation against a small knowledge base.
//!
//! Each candidate of a mention gets a logit from four features combined by a
//! learned weight vector:
//!
//! 1. `(m_i W_m) . d_e / sqrt(D)`: mention embedding against the encoded
//!    description of the candidate
//! 2. `t_ed . types(e) / |types(e)|`: fine-type predictions of the mention
//!    against the candidate's known fine types
//! 3. `(r_i Q) . d_e / sqrt(D)`: mean knowledge-base relation scores of the
//!    pairs around the mention, projected against the description
//! 4. the link prior P(e | m)
//!
//! Features 2 and 3 are how the `et.ed` and `rc.ed` heads get trained.

use std::collections::BTreeMap;

use docie_autodiff::{sigmoid, Graph, Init, NodeId, ParamId, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::document::Candidate;
use crate::encoder::{check_transformer, Encoder};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdConfig {
    pub max_candidates: usize,
    pub description_dim: usize,
    pub description_layers: usize,
    pub description_heads: usize,
    pub description_ffn_dim: usize,
    pub description_tokens: usize,
    pub dropout: f64,
}

impl Default for EdConfig {
    fn default() -> Self {
        Self {
            max_candidates: 30,
            description_dim: 300,
            description_layers: 2,
            description_heads: 4,
            description_ffn_dim: 600,
            description_tokens: 32,
            dropout: 0.1,
        }
    }
}

impl EdConfig {
    pub fn validate(&self) -> Result<()> {
        check_transformer("ed.description", self.description_dim, self.description_heads, self.dropout)?;
        if self.max_candidates == 0 || self.description_tokens == 0 {
            return Err(Error::Config(
                "ed.max_candidates and ed.description_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// What the scorer needs to know about one knowledge-base entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    /// Description token ids, never empty (a lone PAD stands in for none).
    pub description: Vec<usize>,
    /// Indicator over fine types, normalised to sum 1 (all zero if none).
    pub fine_types: Vec<f64>,
}

impl EntityRecord {
    pub fn new(description: &str, fine_types: &[usize], vocab: &Vocabulary, max_tokens: usize, n_fine: usize) -> Self {
        let mut ids: Vec<usize> = description
            .split_whitespace()
            .take(max_tokens)
            .map(|t| vocab.id(t))
            .collect();
        if ids.is_empty() {
            ids.push(Vocabulary::PAD_ID);
        }
        let mut ind = vec![0.0; n_fine];
        for &t in fine_types {
            ind[t] = 1.0 / fine_types.len() as f64;
        }
        Self {
            description: ids,
            fine_types: ind,
        }
    }

    /// Record for an identifier missing from the knowledge base.
    pub fn unknown(n_fine: usize) -> Self {
        Self {
            description: vec![Vocabulary::PAD_ID],
            fine_types: vec![0.0; n_fine],
        }
    }
}

pub const N_FEATURES: usize = 4;

#[derive(Debug, Clone)]
pub struct EntityLinker {
    pub description: Encoder,
    pub mention_proj: ParamId,
    pub relation_proj: ParamId,
    pub combine: ParamId,
    pub combine_bias: ParamId,
}

/// Inputs from the rest of the network, one row per mention.
#[derive(Debug, Clone, Copy)]
pub struct LinkInputs<'a> {
    pub mentions: NodeId,
    /// Sigmoid of the `et.ed` logits.
    pub fine_types: NodeId,
    /// Mean sigmoid `rc.ed` scores over pairs containing the mention.
    pub relation_context: NodeId,
    pub candidates: &'a [Vec<Candidate>],
}

/// Candidate logits of a document; mention `m` owns rows
/// `offsets[m]..offsets[m + 1]`.
#[derive(Debug, Clone, Default)]
pub struct LinkGraph {
    pub candidates: Vec<Vec<Candidate>>,
    pub offsets: Vec<usize>,
    /// `[total candidates, 1]`, absent when no mention has a candidate.
    pub logits: Option<NodeId>,
}

impl EntityLinker {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        mention_dim: usize,
        n_fine_relations: usize,
        description_vocab: usize,
        cfg: &EdConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.description_dim;
        Ok(Self {
            description: Encoder::new(
                store,
                "ed.description",
                description_vocab,
                cfg.description_tokens,
                d,
                cfg.description_layers,
                cfg.description_heads,
                cfg.description_ffn_dim,
                cfg.dropout,
                rng,
            )?,
            mention_proj: store.add("ed.mention_proj", mention_dim, d, Init::XavierUniform, rng)?,
            relation_proj: store.add("ed.relation_proj", n_fine_relations, d, Init::XavierUniform, rng)?,
            combine: store.add("ed.combine.w", N_FEATURES, 1, Init::Ones, rng)?,
            combine_bias: store.add("ed.combine.b", 1, 1, Init::Zeros, rng)?,
        })
    }

    /// Mean-pooled description encoding, `[1, D]`.
    pub fn encode_description(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        let h = self.description.forward(g, store, ids)?;
        let n = g.shape(h).0;
        Ok(g.mean_rows(h, 0, n)?)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: LinkInputs<'_>,
        entities: &dyn Fn(&str) -> EntityRecord,
    ) -> Result<LinkGraph> {
        let mut offsets = vec![0];
        let mut cand_mention = Vec::new();
        let mut cand_entity = Vec::new();
        let mut pem = Vec::new();
        let mut unique: BTreeMap<&str, usize> = BTreeMap::new();
        for (m, list) in inputs.candidates.iter().enumerate() {
            for c in list {
                let next = unique.len();
                cand_entity.push(*unique.entry(c.entity_id.as_str()).or_insert(next));
                cand_mention.push(m);
                pem.push(c.prior);
            }
            offsets.push(cand_mention.len());
        }
        let mut out = LinkGraph {
            candidates: inputs.candidates.to_vec(),
            offsets,
            logits: None,
        };
        if cand_mention.is_empty() {
            return Ok(out);
        }

        let mut order: Vec<(&str, usize)> = unique.into_iter().collect();
        order.sort_by_key(|(_, slot)| *slot);
        let records: Vec<EntityRecord> = order.iter().map(|(id, _)| entities(id)).collect();
        let rows = records
            .iter()
            .map(|r| self.encode_description(g, store, &r.description))
            .collect::<Result<Vec<_>>>()?;
        let desc = g.concat_rows(&rows)?;
        let dim = g.shape(desc).1;
        let norm = 1.0 / (dim as f64).sqrt();
        let de = g.gather_rows(desc, &cand_entity)?;

        let wm = g.param(store, self.mention_proj);
        let pm = g.matmul(inputs.mentions, wm)?;
        let pm = g.gather_rows(pm, &cand_mention)?;
        let f1 = g.row_dot(pm, de)?;
        let f1 = g.scale(f1, norm);

        let n_fine = g.shape(inputs.fine_types).1;
        let mut indicator = Vec::with_capacity(cand_entity.len() * n_fine);
        for &e in &cand_entity {
            indicator.extend_from_slice(&records[e].fine_types);
        }
        let ind = g.constant(cand_entity.len(), n_fine, indicator)?;
        let t = g.gather_rows(inputs.fine_types, &cand_mention)?;
        let f2 = g.row_dot(t, ind)?;

        let q = g.param(store, self.relation_proj);
        let rq = g.matmul(inputs.relation_context, q)?;
        let rq = g.gather_rows(rq, &cand_mention)?;
        let f3 = g.row_dot(rq, de)?;
        let f3 = g.scale(f3, norm);

        let prior = g.constant(pem.len(), 1, pem)?;
        let feats = g.concat_cols(&[f1, f2, f3, prior])?;
        let w = g.param(store, self.combine);
        let logits = g.matmul(feats, w)?;
        let b = g.param(store, self.combine_bias);
        out.logits = Some(g.add_row(logits, b)?);
        Ok(out)
    }

    /// BCE with target 1 on each mention's gold candidate and 0 on the rest.
    /// Mentions without gold id, or whose gold id has no candidate, are left
    /// out. `None` when nothing remains.
    pub fn loss(&self, g: &mut Graph, lg: &LinkGraph, gold: &[Option<String>]) -> Result<Option<NodeId>> {
        let Some(logits) = lg.logits else {
            return Ok(None);
        };
        let total = *lg.offsets.last().unwrap_or(&0);
        let mut targets = vec![0.0; total];
        let mut mask = vec![0.0; total];
        for (m, list) in lg.candidates.iter().enumerate() {
            let Some(id) = gold.get(m).and_then(Option::as_ref) else {
                continue;
            };
            let Some(hit) = list.iter().position(|c| &c.entity_id == id) else {
                continue;
            };
            let base = lg.offsets[m];
            targets[base + hit] = 1.0;
            mask[base..base + list.len()].fill(1.0);
        }
        if mask.iter().all(|v| *v == 0.0) {
            return Ok(None);
        }
        Ok(Some(g.bce_with_logits(logits, &targets, Some(&mask))?))
    }
}

/// Candidate probabilities of mention `m` in candidate order.
pub fn candidate_scores(g: &Graph, lg: &LinkGraph, m: usize) -> Vec<f64> {
    match lg.logits {
        Some(logits) => g.value(logits)[lg.offsets[m]..lg.offsets[m + 1]]
            .iter()
            .map(|z| sigmoid(*z))
            .collect(),
        None => Vec::new(),
    }
}

/// Best-scoring candidate of each mention with its probability; the first
/// candidate wins ties. `None` (NIL) when the list is empty.
pub fn predict_ids(g: &Graph, lg: &LinkGraph) -> Vec<Option<(String, f64)>> {
    (0..lg.candidates.len())
        .map(|m| {
            let scores = candidate_scores(g, lg, m);
            let mut best: Option<usize> = None;
            for (i, s) in scores.iter().enumerate() {
                if best.is_none_or(|b| *s > scores[b]) {
                    best = Some(i);
                }
            }
            best.map(|b| (lg.candidates[m][b].entity_id.clone(), scores[b]))
        })
        .collect()
}

/// Entity id of a cluster from its mentions' predictions. NIL mentions
/// abstain. The most frequent id wins; ties go to the larger summed score,
/// then to the lexicographically smaller id. All NIL gives NIL.
pub fn majority_vote_cluster_id(votes: &[Option<(String, f64)>]) -> Result<Option<String>> {
    if votes.is_empty() {
        return Err(Error::Contract("majority vote over an empty cluster".into()));
    }
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (id, score) in votes.iter().flatten() {
        let e = tally.entry(id.as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += score;
    }
    let mut best: Option<(&str, usize, f64)> = None;
    // BTreeMap order makes the lexicographically smaller id win exact ties
    for (id, (count, sum)) in tally {
        let better = match best {
            None => true,
            Some((_, c, s)) => count > c || (count == c && sum > s),
        };
        if better {
            best = Some((id, count, sum));
        }
    }
    Ok(best.map(|(id, _, _)| id.to_string()))
}
