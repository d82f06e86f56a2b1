//! BIO token tags for mention spans.

use serde::{Deserialize, Serialize};

use crate::document::MentionSpan;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BioLabel {
    O,
    B,
    I,
}

impl BioLabel {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            BioLabel::O => 0,
            BioLabel::B => 1,
            BioLabel::I => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            1 => BioLabel::B,
            2 => BioLabel::I,
            _ => BioLabel::O,
        }
    }
}

/// Tags the first token of each span `B`, the rest `I`, everything else `O`.
/// Spans must be in bounds and pairwise disjoint.
pub fn bio_encode(spans: &[MentionSpan], n_tokens: usize) -> Result<Vec<BioLabel>> {
    let mut labels = vec![BioLabel::O; n_tokens];
    let mut sorted = spans.to_vec();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0].overlaps(&w[1]) || w[0] == w[1] {
            return Err(Error::Contract(format!(
                "overlapping spans [{}, {}) and [{}, {}) cannot be BIO-encoded",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    for s in &sorted {
        if s.start >= s.end || s.end > n_tokens {
            return Err(Error::Contract(format!(
                "span [{}, {}) invalid for {n_tokens} tokens",
                s.start, s.end
            )));
        }
        labels[s.start] = BioLabel::B;
        for l in &mut labels[s.start + 1..s.end] {
            *l = BioLabel::I;
        }
    }
    Ok(labels)
}

/// Maximal `B I*` runs become spans. An `I` that follows `O` (or starts the
/// sequence) opens a new span as if it were `B`.
pub fn bio_decode(labels: &[BioLabel]) -> Vec<MentionSpan> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, l) in labels.iter().enumerate() {
        match l {
            BioLabel::B => {
                if let Some(s) = open.replace(i) {
                    spans.push(MentionSpan::new(s, i));
                }
            }
            BioLabel::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            BioLabel::O => {
                if let Some(s) = open.take() {
                    spans.push(MentionSpan::new(s, i));
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push(MentionSpan::new(s, labels.len()));
    }
    spans
}
