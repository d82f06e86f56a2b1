//! Mention detection: a linear BIO classifier over token embeddings, span
//! decoding and average pooling of span tokens into mention embeddings.

use docie_autodiff::nn::Linear;
use docie_autodiff::{Graph, NodeId, ParamStore};
use rand::Rng;

use crate::bio::{bio_decode, BioLabel};
use crate::document::MentionSpan;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct MentionDetector {
    pub head: Linear,
}

impl MentionDetector {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            head: Linear::new(store, "md.head", dim, BioLabel::COUNT, true, rng)?,
        })
    }

    /// `[n_tokens, 3]` logits in [`BioLabel::index`] order.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<NodeId> {
        Ok(self.head.forward(g, store, h)?)
    }

    /// Cross-entropy against the gold tag of every token.
    pub fn loss(&self, g: &mut Graph, logits: NodeId, gold: &[BioLabel]) -> Result<NodeId> {
        let targets: Vec<usize> = gold.iter().map(|l| l.index()).collect();
        Ok(g.cross_entropy(logits, &targets)?)
    }
}

/// Argmax tag per token (ties go to the lower index: O, then B, then I).
pub fn argmax_labels(logits: &[f64]) -> Vec<BioLabel> {
    logits
        .chunks(BioLabel::COUNT)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            BioLabel::from_index(best)
        })
        .collect()
}

pub fn decode_mentions(logits: &[f64]) -> Vec<MentionSpan> {
    bio_decode(&argmax_labels(logits))
}

/// `[spans.len(), dim]` mean of the token rows of each span.
pub fn pool_mentions(g: &mut Graph, h: NodeId, spans: &[MentionSpan]) -> Result<NodeId> {
    let n = g.shape(h).0;
    let groups = spans
        .iter()
        .map(|s| {
            if s.start >= s.end || s.end > n {
                Err(Error::Contract(format!(
                    "mention [{}, {}) outside {n} encoded tokens",
                    s.start, s.end
                )))
            } else {
                Ok((s.start..s.end).collect())
            }
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    Ok(g.group_mean(h, &groups)?)
}
