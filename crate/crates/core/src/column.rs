//! Column-wise set embedding.
//!
//! Every column is treated as a set of scalars. A shared set transformer of
//! induced self-attention blocks turns the set into per-cell weights `W` and
//! biases `B`, and each cell is embedded as `e = W ⊙ c + B`. Inducing vectors
//! only ever attend to train rows, so test rows cannot leak into the
//! column statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{AttentionBlock, LayerNorm, Linear};
use crate::tensor::{AttentionMask, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnEmbedderConfig {
    pub d: usize,
    pub k_inducing: usize,
    pub n_isab: usize,
    pub heads: usize,
}

impl Default for ColumnEmbedderConfig {
    fn default() -> Self {
        ColumnEmbedderConfig {
            d: 128,
            k_inducing: 128,
            n_isab: 3,
            heads: 4,
        }
    }
}

impl ColumnEmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "column embedder: d={} not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.k_inducing == 0 || self.n_isab == 0 {
            return Err(Error::Config("column embedder needs k_inducing >= 1 and n_isab >= 1".into()));
        }
        Ok(())
    }
}

/// One induced self-attention block with its own inducing vectors.
#[derive(Clone, Debug)]
pub struct Isab {
    pub inducing: ParamId,
    pub induce: AttentionBlock,
    pub broadcast: AttentionBlock,
}

impl Isab {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ColumnEmbedderConfig, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (cfg.d as f64).sqrt();
        Isab {
            inducing: store.add_normal(format!("{name}.inducing"), vec![cfg.k_inducing, cfg.d], std, rng),
            induce: AttentionBlock::new(store, &format!("{name}.mab1"), cfg.d, cfg.heads, true, rng),
            broadcast: AttentionBlock::new(store, &format!("{name}.mab2"), cfg.d, cfg.heads, true, rng),
        }
    }

    /// `u` is `[B, n, d]`. Returns `(MAB₂(u, M, M), M)` where
    /// `M = MAB₁(V_I, u_train, u_train)` reads only the first `n_train` rows.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        u: Var,
        n_train: usize,
    ) -> Result<(Var, Var)> {
        let batch = g.shape(u)[0];
        let n = g.shape(u)[1];
        if n_train == 0 || n_train > n {
            return Err(Error::Input(format!("isab needs 1 <= n_train <= {n}, got {n_train}")));
        }
        let inducing = g.param(store, self.inducing);
        let queries = g.expand(inducing, batch);
        let m = self
            .induce
            .forward(g, store, queries, Some(u), &AttentionMask::KeyPrefix(n_train), None)?;
        let out = self.broadcast.forward(g, store, u, Some(m), &AttentionMask::Full, None)?;
        Ok((out, m))
    }
}

#[derive(Clone, Debug)]
pub struct ColumnEmbedder {
    pub config: ColumnEmbedderConfig,
    pub input: Linear,
    pub blocks: Vec<Isab>,
    pub norm_out: LayerNorm,
    pub weight_head: Linear,
    pub bias_head: Linear,
}

/// Graph handles produced by [`ColumnEmbedder::forward`]; all but `induced`
/// are `[m, n, d]` (column-major).
pub struct ColumnVars {
    pub embedding: Var,
    pub weight: Var,
    pub bias: Var,
    /// `M` of the final block, `[m, k, d]`.
    pub induced: Var,
}

/// `E`, `W`, `B` as `n x m x d` tensors.
#[derive(Clone, Debug)]
pub struct ColumnEmbedding<T = f32> {
    pub embedding: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl ColumnEmbedder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, config: ColumnEmbedderConfig, rng: &mut impl Rng) -> Self {
        let d = config.d;
        let input = Linear::new(store, &format!("{prefix}.input"), 1, d, true, rng);
        let blocks = (0..config.n_isab)
            .map(|i| Isab::new(store, &format!("{prefix}.isab{i}"), &config, rng))
            .collect();
        ColumnEmbedder {
            input,
            blocks,
            norm_out: LayerNorm::new(store, &format!("{prefix}.norm_out"), d),
            weight_head: Linear::new(store, &format!("{prefix}.weight_head"), d, d, true, rng),
            bias_head: Linear::new(store, &format!("{prefix}.bias_head"), d, d, true, rng),
            config,
        }
    }

    /// `columns` is `[m, n]`: one row per table column.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        columns: Var,
        n_train: usize,
    ) -> Result<ColumnVars> {
        let shape = g.shape(columns).to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::Input(format!("column embedder needs a non-empty [m, n] input, got {shape:?}")));
        }
        let (m, n) = (shape[0], shape[1]);
        let cells = g.reshape(columns, vec![m, n, 1])?;
        let mut u = self.input.forward(g, store, cells)?;
        let mut induced = None;
        for block in &self.blocks {
            let (out, m_block) = block.forward(g, store, u, n_train)?;
            u = out;
            induced = Some(m_block);
        }
        let v = self.norm_out.forward(g, store, u)?;
        let weight = self.weight_head.forward(g, store, v)?;
        let bias = self.bias_head.forward(g, store, v)?;
        let scaled = g.scale_rows(weight, columns)?;
        let embedding = g.add(scaled, bias)?;
        Ok(ColumnVars {
            embedding,
            weight,
            bias,
            induced: induced.expect("at least one isab block"),
        })
    }

    /// Embeds every column of a row-major `n x m` table.
    pub fn embed_table<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, n_train: usize) -> Result<ColumnEmbedding<T>> {
        let columns = columns_of(x)?;
        let mut g = Graph::inference();
        let c = g.input(columns);
        let vars = self.forward(&mut g, store, c, n_train)?;
        g.check_finite()?;
        let to_rows = |g: &mut Graph<T>, v: Var| -> Result<Tensor<T>> {
            let t = g.swap_axes01(v)?;
            Ok(g.take(t))
        };
        Ok(ColumnEmbedding {
            embedding: to_rows(&mut g, vars.embedding)?,
            weight: to_rows(&mut g, vars.weight)?,
            bias: to_rows(&mut g, vars.bias)?,
        })
    }

    /// `(W, B, e)` for a single column, each `n x d`.
    pub fn embed_column<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        column: &[T],
        n_train: usize,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        if column.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("column contains non-finite values".into()));
        }
        let n = column.len();
        let d = self.config.d;
        let x = Tensor::new(vec![n, 1], column.to_vec())?;
        let emb = self.embed_table(store, &x, n_train)?;
        Ok((
            emb.weight.reshape(vec![n, d])?,
            emb.bias.reshape(vec![n, d])?,
            emb.embedding.reshape(vec![n, d])?,
        ))
    }

    /// Final-block induced representations `M` per column, `[m, k, d]`.
    pub fn induced<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, n_train: usize) -> Result<Tensor<T>> {
        let columns = columns_of(x)?;
        let mut g = Graph::inference();
        let c = g.input(columns);
        let vars = self.forward(&mut g, store, c, n_train)?;
        g.check_finite()?;
        Ok(g.take(vars.induced))
    }
}

/// Sum of the induced representations over the inducing axis: `[k, d] -> [d]`.
pub fn summarize_column<T: Scalar>(induced: &Tensor<T>) -> Result<Vec<T>> {
    if induced.shape().len() != 2 {
        return Err(Error::shape("summarize_column", format!("{:?}", induced.shape())));
    }
    let d = induced.shape()[1];
    let mut out = vec![T::zero(); d];
    for row in induced.rows() {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Ok(out)
}

/// Writes `col_id,dim_0..dim_{d-1}` rows.
pub fn write_summary_csv<W: std::io::Write>(out: W, summaries: &[Vec<f32>]) -> Result<()> {
    let d = summaries.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["col_id".to_string()];
    header.extend((0..d).map(|i| format!("dim_{i}")));
    w.write_record(&header).map_err(csv_io)?;
    for (j, s) in summaries.iter().enumerate() {
        let mut rec = vec![j.to_string()];
        rec.extend(s.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Transposes a row-major `n x m` table into `[m, n]` columns.
pub(crate) fn columns_of<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 2 || x.numel() == 0 {
        return Err(Error::Input(format!("expected a non-empty n x m table, got {:?}", x.shape())));
    }
    let (n, m) = (x.shape()[0], x.shape()[1]);
    let data = x.data();
    Ok(Tensor::from_fn(vec![m, n], |i| data[(i % n) * m + i / n]))
}

#[cfg(test)]
#[path = "column_tests.rs"]
mod tests;
