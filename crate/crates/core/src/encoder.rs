//! Token encoder: word embeddings plus learned positions through a small
//! transformer, giving one contextual vector per token.

use docie_autodiff::nn::TransformerStack;
use docie_autodiff::{Graph, Init, NodeId, ParamId, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_seq_len: 510,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_transformer("encoder", self.embedding_dim, self.n_heads, self.dropout)?;
        if self.max_seq_len == 0 {
            return Err(Error::Config("encoder.max_seq_len must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_transformer(name: &str, dim: usize, heads: usize, dropout: f64) -> Result<()> {
    if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{name}: dimension {dim} is not divisible into {heads} heads"
        )));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Config(format!("{name}: dropout {dropout} not in [0, 1)")));
    }
    Ok(())
}

/// Embedding table, position table and transformer stack. Also used (with its
/// own vocabulary and sizes) for knowledge-base descriptions.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub stack: TransformerStack,
    dropout: f64,
    max_len: usize,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        max_len: usize,
        dim: usize,
        n_layers: usize,
        n_heads: usize,
        ffn_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            tokens: store.add(format!("{name}.tokens"), vocab_size, dim, Init::Uniform(0.5), rng)?,
            positions: store.add(format!("{name}.positions"), max_len, dim, Init::Uniform(0.1), rng)?,
            stack: TransformerStack::new(store, name, n_layers, dim, n_heads, ffn_dim, dropout, rng)?,
            dropout,
            max_len,
        })
    }

    pub fn from_config<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            store,
            "encoder",
            vocab_size,
            config.max_seq_len,
            config.embedding_dim,
            config.n_layers,
            config.n_heads,
            config.ffn_dim,
            config.dropout,
            rng,
        )
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `[ids.len(), dim]` contextual embeddings. Callers truncate first; an
    /// empty or overlong input is a contract error.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Contract("cannot encode an empty token sequence".into()));
        }
        if ids.len() > self.max_len {
            return Err(Error::Contract(format!(
                "{} tokens exceed the encoder limit of {}",
                ids.len(),
                self.max_len
            )));
        }
        let tok = g.embedding(store, self.tokens, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.embedding(store, self.positions, &positions)?;
        let x = g.add(tok, pos)?;
        let x = g.dropout(x, self.dropout)?;
        Ok(self.stack.forward(g, store, x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(store: &mut ParamStore) -> Encoder {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig {
            embedding_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            max_seq_len: 10,
            ..EncoderConfig::default()
        };
        Encoder::from_config(store, 12, &cfg, &mut rng).unwrap()
    }

    #[test]
    fn shape_and_determinism() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        let run = |ids: &[usize]| {
            let mut g = Graph::new();
            let h = enc.forward(&mut g, &store, ids).unwrap();
            assert_eq!(g.shape(h), (ids.len(), 8));
            g.value(h).to_vec()
        };
        assert_eq!(run(&[2, 3, 4]), run(&[2, 3, 4]));
    }

    #[test]
    fn swapping_tokens_changes_output() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        let mut g = Graph::new();
        let a = enc.forward(&mut g, &store, &[2, 3, 4]).unwrap();
        let b = enc.forward(&mut g, &store, &[3, 2, 4]).unwrap();
        // row 2 holds the same token in both, so only positions can differ it
        assert_ne!(g.value(a)[16..24], g.value(b)[16..24]);
    }

    #[test]
    fn rejects_empty_and_overlong() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        let mut g = Graph::new();
        assert!(enc.forward(&mut g, &store, &[]).is_err());
        assert!(enc.forward(&mut g, &store, &[2; 11]).is_err());
    }

    #[test]
    fn gradient_reaches_used_embedding_rows() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        let mut g = Graph::training(1);
        let h = enc.forward(&mut g, &store, &[5, 6]).unwrap();
        let loss = g.sum(h);
        let sq = g.mul(loss, loss).unwrap();
        let grads = g.backward(sq).unwrap();
        let table = grads.get(enc.tokens).unwrap();
        assert!(table[5 * 8..6 * 8].iter().any(|v| *v != 0.0));
        assert!(table[7 * 8..8 * 8].iter().all(|v| *v == 0.0));
    }
}
