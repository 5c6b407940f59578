//! Layer building blocks shared by the three transformers.

use rand::Rng;

use super::{AttentionMask, Graph, ParamId, ParamStore, RopeSpec, Scalar, Var};
use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_fan_in_uniform(format!("{name}.weight"), vec![out_dim, in_dim], in_dim, rng);
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), vec![out_dim], 0.0));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_const(format!("{name}.gain"), vec![dim], 1.0),
            shift: store.add_const(format!("{name}.shift"), vec![dim], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        g.layer_norm(x, gain, shift, LAYER_NORM_EPS)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
            heads,
        }
    }

    /// `queries` is `[B, Lq, D]`, `context` is `[B, Lk, D]`. Keys and values are
    /// only projected for the rows a prefix mask can reach.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        context: Var,
        mask: &AttentionMask,
        rope: Option<RopeSpec>,
    ) -> Result<Var> {
        let (context, mask) = match mask {
            AttentionMask::KeyPrefix(p) if *p > 0 && g.shape(context).get(1).is_some_and(|&l| l > *p) => {
                (g.slice1(context, 0, *p)?, &AttentionMask::Full)
            }
            _ => (context, mask),
        };
        let mut q = self.query.forward(g, store, queries)?;
        let mut k = self.key.forward(g, store, context)?;
        let v = self.value.forward(g, store, context)?;
        if let Some(spec) = rope {
            q = g.rope(q, spec)?;
            k = g.rope(k, spec)?;
        }
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.output.forward(g, store, a)
    }
}

/// Pre-norm attention block: `h = x + Attn(LN(x), LN(ctx))`, `out = h + FFN(LN(h))`.
/// With no separate context the block is plain self-attention.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm_query: LayerNorm,
    pub norm_context: Option<LayerNorm>,
    pub attention: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Feed-forward hidden width as a multiple of the model width.
pub const FFN_MULT: usize = 2;

impl AttentionBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        AttentionBlock {
            norm_query: LayerNorm::new(store, &format!("{name}.norm_query"), dim),
            norm_context: cross.then(|| LayerNorm::new(store, &format!("{name}.norm_context"), dim)),
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), dim, FFN_MULT * dim, true, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), FFN_MULT * dim, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        context: Option<Var>,
        mask: &AttentionMask,
        rope: Option<RopeSpec>,
    ) -> Result<Var> {
        let xq = self.norm_query.forward(g, store, x)?;
        let xc = match (context, &self.norm_context) {
            (Some(c), Some(norm)) => norm.forward(g, store, c)?,
            (Some(c), None) => self.norm_query.forward(g, store, c)?,
            (None, _) => xq,
        };
        let a = self.attention.forward(g, store, xq, xc, mask, rope)?;
        let h = g.add(x, a)?;
        let f = self.norm_ffn.forward(g, store, h)?;
        let f = self.ffn_in.forward(g, store, f)?;
        let f = g.gelu(f);
        let f = self.ffn_out.forward(g, store, f)?;
        g.add(h, f)
    }
}
