//! Mention-pair scoring for relations and coreference.
//!
//! Mention embeddings pass through a transformer over all mentions of the
//! document. A symmetric bilinear form scores every unordered pair cheaply;
//! the `top_k` best survive into the fine heads:
//!
//! - `rc.final`: relation logits for both orientations, from `[r_h, r_t, r_h*r_t]`
//! - `rc.coref`: coreference logit, from `[r_i + r_j, r_i*r_j]`
//! - `rc.ed`: knowledge-base relation logits on the same symmetric features,
//!   trained only through the linking loss

use std::collections::{BTreeMap, BTreeSet};

use docie_autodiff::nn::{Linear, TransformerStack};
use docie_autodiff::{sigmoid, Graph, Init, NodeId, ParamId, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::document::Triple;
use crate::encoder::check_transformer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RcConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Width of the hidden layer in front of the fine heads.
    pub hidden: usize,
    pub top_k: usize,
    pub relation_threshold: f64,
    pub dropout: f64,
}

impl Default for RcConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 128,
            hidden: 64,
            top_k: 2000,
            relation_threshold: 0.2,
            dropout: 0.1,
        }
    }
}

impl RcConfig {
    pub fn validate(&self) -> Result<()> {
        check_transformer("rc", self.dim, self.n_heads, self.dropout)?;
        if self.top_k == 0 {
            return Err(Error::Config("rc.top_k must be at least 1".into()));
        }
        if !(self.relation_threshold > 0.0 && self.relation_threshold < 1.0) {
            return Err(Error::Config(format!(
                "rc.relation_threshold {} not in (0, 1)",
                self.relation_threshold
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("rc.hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pruning {
    TopK(usize),
    /// Every pair reaches the fine heads; coarse scores are not consulted.
    Off,
}

/// Scores of one surviving pair `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub i: usize,
    pub j: usize,
    pub coarse: f64,
    pub coref: f64,
    /// Relation probabilities with `i` as head.
    pub forward: Vec<f64>,
    /// Relation probabilities with `j` as head.
    pub backward: Vec<f64>,
    /// Empty when the pass skipped the knowledge-graph head.
    pub kg_relation_scores: Vec<f64>,
}

impl PairScore {
    /// Probability of `relation` with `head` as head mention; the pair must
    /// contain both mentions.
    pub fn directed(&self, head: usize, relation: usize) -> f64 {
        if head == self.i {
            self.forward[relation]
        } else {
            self.backward[relation]
        }
    }
}

/// Tape nodes of the pair stage for one document.
#[derive(Debug, Clone, Default)]
pub struct PairGraph {
    pub n_mentions: usize,
    /// Every unordered pair, in `(i, j)` lexicographic order.
    pub pairs: Vec<(usize, usize)>,
    /// `[pairs, 1]`.
    pub coarse_logits: Option<NodeId>,
    /// Indices into `pairs` of the pairs scored by the fine heads, increasing.
    pub survivors: Vec<usize>,
    /// `[2 * survivors, |R|]`: forward orientations, then backward ones.
    pub relation_logits: Option<NodeId>,
    /// `[survivors, 1]`.
    pub coref_logits: Option<NodeId>,
    /// `[survivors, |fine_relations|]`.
    pub kg_logits: Option<NodeId>,
}

impl PairGraph {
    pub fn surviving_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.survivors.iter().map(|&s| self.pairs[s])
    }

    /// For each mention, the rows (survivor positions) of pairs containing it.
    pub fn incident(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_mentions];
        for (row, (i, j)) in self.surviving_pairs().enumerate() {
            out[i].push(row);
            out[j].push(row);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RelationModule {
    pub input: Linear,
    pub stack: TransformerStack,
    pub coarse_w: ParamId,
    pub coarse_b: ParamId,
    pub directed: Linear,
    pub final_head: Linear,
    pub symmetric: Linear,
    pub coref_head: Linear,
    pub kg_head: Linear,
    dropout: f64,
}

impl RelationModule {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        mention_dim: usize,
        n_relations: usize,
        n_fine_relations: usize,
        cfg: &RcConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            input: Linear::new(store, "rc.input", mention_dim, d, true, rng)?,
            stack: TransformerStack::new(store, "rc.encoder", cfg.n_layers, d, cfg.n_heads, cfg.ffn_dim, cfg.dropout, rng)?,
            coarse_w: store.add("rc.coarse.w", d, d, Init::Uniform(0.1), rng)?,
            coarse_b: store.add("rc.coarse.b", 1, 1, Init::Zeros, rng)?,
            directed: Linear::new(store, "rc.directed", 3 * d, cfg.hidden, true, rng)?,
            final_head: Linear::new(store, "rc.final", cfg.hidden, n_relations, true, rng)?,
            symmetric: Linear::new(store, "rc.symmetric", 2 * d, cfg.hidden, true, rng)?,
            coref_head: Linear::new(store, "rc.coref", cfg.hidden, 1, true, rng)?,
            kg_head: Linear::new(store, "rc.ed", cfg.hidden, n_fine_relations, true, rng)?,
            dropout: cfg.dropout,
        })
    }

    /// Cross-mention encoding, `[n, dim]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, mentions: NodeId) -> Result<NodeId> {
        let x = self.input.forward(g, store, mentions)?;
        Ok(self.stack.forward(g, store, x)?)
    }

    /// Coarse logits `r_i^T W r_j + b` with `W` symmetrised, for `pairs`.
    pub fn coarse(&self, g: &mut Graph, store: &ParamStore, reps: NodeId, pairs: &[(usize, usize)]) -> Result<NodeId> {
        let n = g.shape(reps).0;
        let w = g.param(store, self.coarse_w);
        let wt = g.transpose(w);
        let w2 = g.add(w, wt)?;
        let wsym = g.scale(w2, 0.5);
        let rw = g.matmul(reps, wsym)?;
        let rt = g.transpose(reps);
        let all = g.matmul(rw, rt)?;
        let flat: Vec<usize> = pairs.iter().map(|&(i, j)| i * n + j).collect();
        let picked = g.gather_elems(all, &flat)?;
        let b = g.param(store, self.coarse_b);
        Ok(g.add_row(picked, b)?)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mentions: NodeId,
        pruning: Pruning,
        kg: bool,
    ) -> Result<PairGraph> {
        let n = g.shape(mentions).0;
        let mut out = PairGraph {
            n_mentions: n,
            ..PairGraph::default()
        };
        if n == 0 {
            return Ok(out);
        }
        let reps = self.encode(g, store, mentions)?;
        out.pairs = all_pairs(n);
        if out.pairs.is_empty() {
            return Ok(out);
        }
        let coarse = self.coarse(g, store, reps, &out.pairs)?;
        out.coarse_logits = Some(coarse);
        out.survivors = match pruning {
            Pruning::Off => (0..out.pairs.len()).collect(),
            Pruning::TopK(k) => topk_prune(g.value(coarse), k),
        };

        let (is, js): (Vec<usize>, Vec<usize>) = out.surviving_pairs().unzip();
        let ri = g.gather_rows(reps, &is)?;
        let rj = g.gather_rows(reps, &js)?;
        let prod = g.mul(ri, rj)?;

        let fwd = g.concat_cols(&[ri, rj, prod])?;
        let bwd = g.concat_cols(&[rj, ri, prod])?;
        let both = g.concat_rows(&[fwd, bwd])?;
        let h = self.directed.forward(g, store, both)?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.dropout)?;
        out.relation_logits = Some(self.final_head.forward(g, store, h)?);

        let sum = g.add(ri, rj)?;
        let sym = g.concat_cols(&[sum, prod])?;
        let h = self.symmetric.forward(g, store, sym)?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.dropout)?;
        out.coref_logits = Some(self.coref_head.forward(g, store, h)?);
        // Only disambiguation reads the knowledge-graph head.
        if kg {
            out.kg_logits = Some(self.kg_head.forward(g, store, h)?);
        }
        Ok(out)
    }

    /// Relation loss over surviving pairs (both orientations, every relation)
    /// plus the auxiliary coarse loss over all pairs. `None` without pairs.
    pub fn relation_loss(&self, g: &mut Graph, pg: &PairGraph, labels: &PairLabels) -> Result<Option<NodeId>> {
        let (Some(rel), Some(coarse)) = (pg.relation_logits, pg.coarse_logits) else {
            return Ok(None);
        };
        let fine = g.bce_with_logits(rel, &labels.relation_targets(pg, self.final_head.fan_out), None)?;
        let coarse = g.bce_with_logits(coarse, &labels.coarse_targets(pg), None)?;
        Ok(Some(g.add(fine, coarse)?))
    }

    /// Coreference loss over surviving pairs. `None` without pairs.
    pub fn coref_loss(&self, g: &mut Graph, pg: &PairGraph, labels: &PairLabels) -> Result<Option<NodeId>> {
        let Some(coref) = pg.coref_logits else {
            return Ok(None);
        };
        let targets: Vec<f64> = pg
            .surviving_pairs()
            .map(|(i, j)| f64::from(u8::from(labels.same_cluster(i, j))))
            .collect();
        Ok(Some(g.bce_with_logits(coref, &targets, None)?))
    }
}

pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// increasing index order. Everything survives when `k >= scores.len()`.
pub fn topk_prune(scores: &[f64], k: usize) -> Vec<usize> {
    if k >= scores.len() {
        return (0..scores.len()).collect();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Gold pair labels projected from entity-level annotation: a mention pair is
/// positive for `r` when its clusters form a gold triple with relation `r`.
#[derive(Debug, Clone)]
pub struct PairLabels {
    mention_cluster: Vec<usize>,
    triples: BTreeSet<(usize, usize, usize)>,
}

impl PairLabels {
    /// `mention_cluster[m]` is the gold cluster of mention `m`; `triples`
    /// hold `(head cluster, relation index, tail cluster)`.
    pub fn new(mention_cluster: Vec<usize>, triples: impl IntoIterator<Item = (usize, usize, usize)>) -> Self {
        Self {
            mention_cluster,
            triples: triples.into_iter().collect(),
        }
    }

    pub fn same_cluster(&self, i: usize, j: usize) -> bool {
        self.mention_cluster[i] == self.mention_cluster[j]
    }

    pub fn has_relation(&self, head: usize, relation: usize, tail: usize) -> bool {
        self.triples
            .contains(&(self.mention_cluster[head], relation, self.mention_cluster[tail]))
    }

    fn connected(&self, i: usize, j: usize) -> bool {
        let (a, b) = (self.mention_cluster[i], self.mention_cluster[j]);
        a == b || self.triples.iter().any(|&(h, _, t)| (h, t) == (a, b) || (h, t) == (b, a))
    }

    pub fn relation_targets(&self, pg: &PairGraph, n_relations: usize) -> Vec<f64> {
        let s = pg.survivors.len();
        let mut t = vec![0.0; 2 * s * n_relations];
        for (row, (i, j)) in pg.surviving_pairs().enumerate() {
            for r in 0..n_relations {
                if self.has_relation(i, r, j) {
                    t[row * n_relations + r] = 1.0;
                }
                if self.has_relation(j, r, i) {
                    t[(s + row) * n_relations + r] = 1.0;
                }
            }
        }
        t
    }

    /// Label 1 when the two mentions corefer or their entities are related.
    pub fn coarse_targets(&self, pg: &PairGraph) -> Vec<f64> {
        pg.pairs
            .iter()
            .map(|&(i, j)| f64::from(u8::from(self.connected(i, j))))
            .collect()
    }
}

/// Reads the pair stage off the tape as probabilities, one record per
/// surviving pair.
pub fn pair_scores(g: &Graph, pg: &PairGraph) -> Vec<PairScore> {
    let (Some(rel), Some(coref), Some(coarse)) = (pg.relation_logits, pg.coref_logits, pg.coarse_logits) else {
        return Vec::new();
    };
    let s = pg.survivors.len();
    let n_rel = g.shape(rel).1;
    let n_kg = pg.kg_logits.map_or(0, |kg| g.shape(kg).1);
    let probs = |v: &[f64]| v.iter().map(|x| sigmoid(*x)).collect::<Vec<f64>>();
    let kg = pg.kg_logits.map_or(&[][..], |kg| g.value(kg));
    let (rel, coref, coarse) = (g.value(rel), g.value(coref), g.value(coarse));
    pg.survivors
        .iter()
        .enumerate()
        .map(|(row, &p)| {
            let (i, j) = pg.pairs[p];
            PairScore {
                i,
                j,
                coarse: sigmoid(coarse[p]),
                coref: sigmoid(coref[row]),
                forward: probs(&rel[row * n_rel..(row + 1) * n_rel]),
                backward: probs(&rel[(s + row) * n_rel..(s + row + 1) * n_rel]),
                kg_relation_scores: probs(&kg[row * n_kg..(row + 1) * n_kg]),
            }
        })
        .collect()
}

/// Entity-level triples: the score of `(c1, r, c2)` is the maximum directed
/// score of `r` over mention pairs `m in c1`, `m' in c2` (unscored pairs count
/// as 0); triples at or above `threshold` are emitted, ordered by head, tail
/// and relation index.
pub fn aggregate_entity_relations(
    scores: &[PairScore],
    clusters: &[Vec<usize>],
    relations: &[String],
    threshold: f64,
) -> Vec<Triple> {
    let by_pair: BTreeMap<(usize, usize), &PairScore> = scores.iter().map(|p| ((p.i, p.j), p)).collect();
    let mut out = Vec::new();
    for (c1, head) in clusters.iter().enumerate() {
        for (c2, tail) in clusters.iter().enumerate() {
            if c1 == c2 {
                continue;
            }
            for (r, name) in relations.iter().enumerate() {
                let mut best = 0.0f64;
                for &a in head {
                    for &b in tail {
                        if a == b {
                            continue;
                        }
                        if let Some(p) = by_pair.get(&(a.min(b), a.max(b))) {
                            best = best.max(p.directed(a, r));
                        }
                    }
                }
                if best >= threshold {
                    out.push(Triple {
                        head: c1,
                        relation: name.clone(),
                        tail: c2,
                    });
                }
            }
        }
    }
    out
}
