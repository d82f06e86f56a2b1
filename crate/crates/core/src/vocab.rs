use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::document::Document;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Word-level vocabulary. Id 0 is padding, id 1 unknown; corpus tokens follow
/// in order of first occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;

    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut order = Vec::new();
        for t in tokens {
            let c = counts.entry(t).or_insert(0);
            if *c == 0 {
                order.push(t);
            }
            *c += 1;
        }
        let mut list = vec![PAD.to_string(), UNK.to_string()];
        list.extend(
            order
                .into_iter()
                .filter(|t| counts[t] >= min_count && *t != PAD && *t != UNK)
                .map(str::to_string),
        );
        Self::from_list(list)
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Restores the lookup index after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_list(self.tokens)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Vocabulary over every token of the corpus with at least `min_count`
/// occurrences, plus the two reserved entries.
pub fn build_vocab(corpus: &[Document], min_count: usize) -> Vocabulary {
    Vocabulary::from_tokens(
        corpus.iter().flat_map(|d| d.tokens.iter().map(String::as_str)),
        min_count,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn doc(text: &str) -> Document {
        Document::from_tokens("d", text.split_whitespace().map(str::to_string).collect())
    }

    #[test]
    fn small_corpus() {
        let v = build_vocab(&[doc("a b"), doc("a")], 1);
        assert_eq!(v.len(), 4);
        assert_ne!(v.id("a"), Vocabulary::UNK_ID);
        assert_ne!(v.id("b"), v.id("a"));
        assert_eq!(v.id("zebra"), Vocabulary::UNK_ID);
        assert_ne!(Vocabulary::PAD_ID, Vocabulary::UNK_ID);
    }

    #[test]
    fn size_is_distinct_tokens_plus_two() {
        let docs = [doc("the cat sat on the mat"), doc("a cat and a dog"), doc("mat dog the")];
        let distinct: BTreeSet<&str> = docs.iter().flat_map(|d| d.tokens.iter().map(String::as_str)).collect();
        let v = build_vocab(&docs, 1);
        assert_eq!(v.len(), distinct.len() + 2);
        // ids dense from zero
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()), if i == 1 { 1 } else { i });
        }
    }

    #[test]
    fn min_count_filters() {
        let v = build_vocab(&[doc("a a b")], 2);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("b"), Vocabulary::UNK_ID);
    }
}
