//! Parameterised building blocks assembled from tape primitives.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Init, ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.w"), fan_in, fan_out, Init::XavierUniform, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.b"), 1, fan_out, Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Option<Self> {
        let weight = store.id(&format!("{name}.w"))?;
        let (fan_in, fan_out) = store.tensor(weight).dims2();
        Some(Self {
            weight,
            bias: store.id(&format!("{name}.b")),
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), 1, dim, Init::Ones, rng)?,
            beta: store.add(format!("{name}.beta"), 1, dim, Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(shape_err("attention", format!("dim {dim} with {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let dim = self.query.fan_out;
        let head_dim = dim / self.heads;
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.output.forward(g, store, merged)
    }
}

/// Post-norm transformer block: `x = LN(x + Attn(x)); x = LN(x + FFN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl TransformerLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng)?,
            ffn_in: Linear::new(store, &format!("{name}.ffn1"), dim, ffn_dim, true, rng)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn2"), ffn_dim, dim, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng)?,
            dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let a = self.attention.forward(g, store, x)?;
        let a = g.dropout(a, self.dropout)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let f = self.ffn_in.forward(g, store, x)?;
        let f = g.gelu(f);
        let f = self.ffn_out.forward(g, store, f)?;
        let f = g.dropout(f, self.dropout)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, store, x)
    }
}

/// Stack of transformer layers.
#[derive(Debug, Clone, Default)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), dim, heads, ffn_dim, dropout, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: NodeId) -> Result<NodeId> {
        for layer in &self.layers {
            x = layer.forward(g, store, x)?;
        }
        Ok(x)
    }
}
