//! Entity typing with two sigmoid heads over mention embeddings: `et.final`
//! predicts dataset types and is trained directly; `et.ed` predicts fine
//! knowledge-base types and learns only through the linking loss.

use std::collections::BTreeSet;

use docie_autodiff::nn::Linear;
use docie_autodiff::{Graph, NodeId, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-mention threshold for multi-label decisions.
pub const TYPE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeAggregation {
    /// One type per entity: the modal argmax type of its mentions.
    #[default]
    MostFrequent,
    /// Union of each mention's types scoring at least 0.5.
    Union,
}

#[derive(Debug, Clone, Copy)]
pub struct EntityTyper {
    pub final_head: Linear,
    pub ed_head: Linear,
}

/// Logits of both heads, each `[n_mentions, labels]`.
#[derive(Debug, Clone, Copy)]
pub struct TypeLogits {
    pub final_logits: NodeId,
    pub ed_logits: NodeId,
}

impl EntityTyper {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dim: usize,
        n_types: usize,
        n_fine_types: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            final_head: Linear::new(store, "et.final", dim, n_types, true, rng)?,
            ed_head: Linear::new(store, "et.ed", dim, n_fine_types, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mentions: NodeId) -> Result<TypeLogits> {
        Ok(TypeLogits {
            final_logits: self.final_head.forward(g, store, mentions)?,
            ed_logits: self.ed_head.forward(g, store, mentions)?,
        })
    }

    /// Binary cross-entropy of the final head against multi-hot gold types,
    /// one row per mention.
    pub fn loss(&self, g: &mut Graph, logits: &TypeLogits, gold: &[BTreeSet<usize>]) -> Result<NodeId> {
        let n_types = self.final_head.fan_out;
        let mut targets = vec![0.0; gold.len() * n_types];
        for (row, types) in gold.iter().enumerate() {
            for &t in types {
                targets[row * n_types + t] = 1.0;
            }
        }
        Ok(g.bce_with_logits(logits.final_logits, &targets, None)?)
    }
}

/// Type indices of one entity from the score rows (probabilities) of its
/// mentions. `most_frequent` breaks ties towards the lower schema index.
pub fn aggregate_cluster_type(rows: &[&[f64]], mode: TypeAggregation) -> Result<BTreeSet<usize>> {
    if rows.is_empty() {
        return Err(Error::Contract("cannot type an empty cluster".into()));
    }
    Ok(match mode {
        TypeAggregation::MostFrequent => {
            let n = rows[0].len();
            let mut votes = vec![0usize; n];
            for row in rows {
                if let Some(best) = argmax(row) {
                    votes[best] += 1;
                }
            }
            argmax(&votes).into_iter().collect()
        }
        TypeAggregation::Union => rows
            .iter()
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, p)| **p >= TYPE_THRESHOLD)
                    .map(|(i, _)| i)
            })
            .collect(),
    })
}

fn argmax<T: PartialOrd>(row: &[T]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in row.iter().enumerate() {
        if best.is_none_or(|b| *v > row[b]) {
            best = Some(i);
        }
    }
    best
}
