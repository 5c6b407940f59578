//! Row-wise interaction over feature embeddings.
//!
//! Each row's `m` feature embeddings are prefixed with learnable CLS tokens
//! and passed through self-attention blocks that rotate queries and keys by
//! sequence position. The final CLS states are concatenated into one
//! `n_cls * d` vector per row. Rows never attend to each other.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{AttentionBlock, LayerNorm};
use crate::tensor::{AttentionMask, Graph, ParamId, ParamStore, RopeSpec, Scalar, Tensor, Var};

pub const DEFAULT_ROPE_BASE: f64 = 100_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    pub head_dim: usize,
}

impl RopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!("rope head_dim must be even, got {}", self.head_dim)));
        }
        if !(self.base > 1.0) {
            return Err(Error::Config(format!("rope base must exceed 1, got {}", self.base)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowInteractorConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub n_cls: usize,
    pub rope_base: f64,
    /// When false, positions are not encoded and the block is
    /// permutation-invariant over features.
    pub rope: bool,
}

impl Default for RowInteractorConfig {
    fn default() -> Self {
        RowInteractorConfig {
            layers: 3,
            heads: 8,
            d: 128,
            n_cls: 4,
            rope_base: DEFAULT_ROPE_BASE,
            rope: true,
        }
    }
}

impl RowInteractorConfig {
    pub fn output_dim(&self) -> usize {
        self.n_cls * self.d
    }

    pub fn rope_config(&self) -> RopeConfig {
        RopeConfig {
            base: self.rope_base,
            head_dim: self.d / self.heads.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("row interactor: d={} not divisible by heads={}", self.d, self.heads)));
        }
        if self.layers == 0 || self.n_cls == 0 {
            return Err(Error::Config("row interactor needs layers >= 1 and n_cls >= 1".into()));
        }
        if self.rope {
            self.rope_config().validate()?;
        }
        Ok(())
    }
}

/// Rotates consecutive pairs `(x[2i], x[2i+1])` by `θ_i = p / base^(2i / len)`.
pub fn rope_rotate<T: Scalar>(x: &[T], p: f64, base: f64) -> Result<Vec<T>> {
    if x.len() % 2 != 0 {
        return Err(Error::Input(format!("rope needs an even dimension, got {}", x.len())));
    }
    let angles = crate::tensor::rope_angles_for(x.len(), base, p);
    let mut out = x.to_vec();
    for (i, th) in angles.into_iter().enumerate() {
        let (c, s) = (T::of(th.cos()), T::of(th.sin()));
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        out[2 * i] = a * c - b * s;
        out[2 * i + 1] = a * s + b * c;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RowInteractor {
    pub config: RowInteractorConfig,
    pub cls: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub norm_out: LayerNorm,
}

impl RowInteractor {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, config: RowInteractorConfig, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (config.d as f64).sqrt();
        let cls = store.add_normal(format!("{prefix}.cls"), vec![config.n_cls, config.d], std, rng);
        let blocks = (0..config.layers)
            .map(|i| AttentionBlock::new(store, &format!("{prefix}.block{i}"), config.d, config.heads, false, rng))
            .collect();
        RowInteractor {
            cls,
            blocks,
            norm_out: LayerNorm::new(store, &format!("{prefix}.norm_out"), config.d),
            config,
        }
    }

    /// `embeddings` is `[n, m, d]`; returns `H` as `[n, n_cls * d]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, embeddings: Var) -> Result<Var> {
        let shape = g.shape(embeddings).to_vec();
        if shape.len() != 3 || shape[1] == 0 || shape[2] != self.config.d {
            return Err(Error::shape("row_interact", format!("expected [n, m>=1, {}], got {shape:?}", self.config.d)));
        }
        let n = shape[0];
        let cls = g.param(store, self.cls);
        let cls = g.expand(cls, n);
        let mut x = g.concat1(cls, embeddings)?;
        let rope = self.config.rope.then_some(RopeSpec {
            heads: self.config.heads,
            base: self.config.rope_base,
        });
        for block in &self.blocks {
            x = block.forward(g, store, x, None, &AttentionMask::Full, rope)?;
        }
        let x = self.norm_out.forward(g, store, x)?;
        let cls_out = g.slice1(x, 0, self.config.n_cls)?;
        g.reshape(cls_out, vec![n, self.config.output_dim()])
    }

    /// Inference helper on an `n x m x d` tensor.
    pub fn row_interact<T: Scalar>(&self, store: &ParamStore<T>, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let e = g.input(embeddings.clone());
        let h = self.forward(&mut g, store, e)?;
        g.check_finite()?;
        Ok(g.take(h))
    }
}

/// Number of rows of `h` that are pairwise distinguishable at `tol` (L∞):
/// rows are greedily grouped with the first earlier row within `tol`.
pub fn count_distinct_rows<T: Scalar>(h: &Tensor<T>, tol: f64) -> usize {
    let mut reps: Vec<&[T]> = Vec::new();
    for row in h.rows() {
        let close = reps.iter().any(|r| {
            r.iter()
                .zip(row)
                .all(|(a, b)| (a.as_f64() - b.as_f64()).abs() <= tol)
        });
        if !close {
            reps.push(row);
        }
    }
    reps.len()
}

#[cfg(test)]
#[path = "row_tests.rs"]
mod tests;
