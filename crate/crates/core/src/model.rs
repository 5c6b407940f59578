//! The full column → row → ICL pipeline and its parameters.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::column::{columns_of, summarize_column, ColumnEmbedder, ColumnEmbedderConfig, ColumnEmbedding};
use crate::error::{Error, Result};
use crate::icl::{ClassProbabilities, IclConfig, IclPredictor};
use crate::row::{count_distinct_rows, RowInteractor, RowInteractorConfig};
use crate::seed;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

pub const COLUMN_PREFIX: &str = "col.";
pub const ROW_PREFIX: &str = "row.";
pub const ICL_PREFIX: &str = "icl.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub column: ColumnEmbedderConfig,
    pub row: RowInteractorConfig,
    pub icl: IclConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size architecture: d = 128, 128 inducing vectors, 3 ISAB blocks,
    /// a 3-layer row transformer and a 12-layer ICL transformer.
    pub fn paper() -> Self {
        ModelConfig {
            column: ColumnEmbedderConfig::default(),
            row: RowInteractorConfig::default(),
            icl: IclConfig::default(),
        }
    }

    /// Same topology shrunk to train on a single CPU core in minutes.
    pub fn desk() -> Self {
        let d = 16;
        ModelConfig {
            column: ColumnEmbedderConfig {
                d,
                k_inducing: 16,
                n_isab: 2,
                heads: 4,
            },
            row: RowInteractorConfig {
                layers: 2,
                heads: 4,
                d,
                ..RowInteractorConfig::default()
            },
            icl: IclConfig {
                layers: 3,
                heads: 4,
                model_dim: 4 * d,
                c_max: 10,
                head_hidden: 4 * d,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.column.validate()?;
        self.row.validate()?;
        self.icl.validate()?;
        if self.row.d != self.column.d {
            return Err(Error::Config(format!(
                "row d={} must equal column d={}",
                self.row.d, self.column.d
            )));
        }
        if self.icl.model_dim != self.row.output_dim() {
            return Err(Error::Config(format!(
                "icl model_dim={} must equal n_cls*d={}",
                self.icl.model_dim,
                self.row.output_dim()
            )));
        }
        Ok(())
    }
}

/// How many columns / rows each inference graph processes at once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Batching {
    pub column_chunk: Option<usize>,
    pub row_chunk: Option<usize>,
}

/// Invocation counters for the three stages.
#[derive(Debug, Default)]
pub struct CallCounts {
    embed: AtomicUsize,
    row: AtomicUsize,
    icl: AtomicUsize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallSnapshot {
    pub embed_table: usize,
    pub row_interact: usize,
    pub icl_forward: usize,
}

impl CallCounts {
    pub fn snapshot(&self) -> CallSnapshot {
        CallSnapshot {
            embed_table: self.embed.load(Ordering::Relaxed),
            row_interact: self.row.load(Ordering::Relaxed),
            icl_forward: self.icl.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn bump_icl(&self) {
        self.icl.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Debug)]
pub struct TabIcl<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub column: ColumnEmbedder,
    pub row: RowInteractor,
    pub icl: IclPredictor,
    calls: CallCounts,
}

impl<T: Scalar> Clone for TabIcl<T> {
    fn clone(&self) -> Self {
        TabIcl {
            config: self.config.clone(),
            params: self.params.clone(),
            column: self.column.clone(),
            row: self.row.clone(),
            icl: self.icl.clone(),
            calls: CallCounts::default(),
        }
    }
}

impl<T: Scalar> TabIcl<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = ParamStore::new();
        let column = ColumnEmbedder::new(&mut params, "col", config.column.clone(), &mut rng);
        let row = RowInteractor::new(&mut params, "row", config.row.clone(), &mut rng);
        let icl = IclPredictor::new(&mut params, "icl", config.icl.clone(), &mut rng);
        Ok(TabIcl {
            config,
            params,
            column,
            row,
            icl,
            calls: CallCounts::default(),
        })
    }

    pub fn calls(&self) -> &CallCounts {
        &self.calls
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> TabIcl<U> {
        TabIcl {
            config: self.config.clone(),
            params: self.params.cast(),
            column: self.column.clone(),
            row: self.row.clone(),
            icl: self.icl.clone(),
            calls: CallCounts::default(),
        }
    }

    /// Row embeddings `H` on a graph (training path). `x` is `n x m`.
    pub fn embed_rows_graph(&self, g: &mut Graph<T>, x: &Tensor<T>, n_train: usize) -> Result<Var> {
        let columns = g.input(columns_of(x)?);
        let col = self.column.forward(g, &self.params, columns, n_train)?;
        let e = g.swap_axes01(col.embedding)?;
        self.row.forward(g, &self.params, e)
    }

    /// Test-row logits on a graph. The first `y_train.len()` rows of `x` are train rows.
    pub fn logits_graph(&self, g: &mut Graph<T>, x: &Tensor<T>, y_train: &[usize], classes: usize) -> Result<Var> {
        let h = self.embed_rows_graph(g, x, y_train.len())?;
        let fused = self.icl.fuse_labels(g, &self.params, h, y_train, classes)?;
        self.icl.forward(g, &self.params, fused, y_train.len())
    }

    /// Mean cross-entropy over the test rows.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        x: &Tensor<T>,
        y_train: &[usize],
        y_test: &[usize],
        classes: usize,
    ) -> Result<Var> {
        let logits = self.logits_graph(g, x, y_train, classes)?;
        g.cross_entropy(logits, y_test, classes)
    }

    /// Column embeddings `E, W, B` (each `n x m x d`).
    pub fn embed_table(&self, x: &Tensor<T>, n_train: usize) -> Result<ColumnEmbedding<T>> {
        self.calls.embed.fetch_add(1, Ordering::Relaxed);
        self.column.embed_table(&self.params, x, n_train)
    }

    /// `H` (`n x n_cls*d`) through independent column and row chunks.
    pub fn row_embeddings(&self, x: &Tensor<T>, n_train: usize, batching: Batching) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.numel() == 0 {
            return Err(Error::Input(format!("expected a non-empty n x m table, got {:?}", x.shape())));
        }
        let (n, m) = (x.shape()[0], x.shape()[1]);
        let d = self.config.column.d;
        self.calls.embed.fetch_add(1, Ordering::Relaxed);
        let columns = columns_of(x)?;
        let col_chunk = batching.column_chunk.unwrap_or(m).clamp(1, m);
        let starts: Vec<usize> = (0..m).step_by(col_chunk).collect();
        let chunks: Vec<Tensor<T>> = starts
            .par_iter()
            .map(|&s| -> Result<Tensor<T>> {
                let len = col_chunk.min(m - s);
                let part = Tensor::new(vec![len, n], columns.data()[s * n..(s + len) * n].to_vec())?;
                let mut g = Graph::inference();
                let c = g.input(part);
                let vars = self.column.forward(&mut g, &self.params, c, n_train)?;
                g.check_finite()?;
                Ok(g.take(vars.embedding))
            })
            .collect::<Result<_>>()?;
        // [m, n, d] column-major chunks -> [n, m, d]
        let mut e = vec![T::zero(); n * m * d];
        for (&s, chunk) in starts.iter().zip(&chunks) {
            let len = chunk.shape()[0];
            for j in 0..len {
                for i in 0..n {
                    e[(i * m + s + j) * d..][..d].copy_from_slice(&chunk.data()[(j * n + i) * d..][..d]);
                }
            }
        }
        self.calls.row.fetch_add(1, Ordering::Relaxed);
        let row_chunk = batching.row_chunk.unwrap_or(n).clamp(1, n);
        let out_dim = self.config.row.output_dim();
        let row_starts: Vec<usize> = (0..n).step_by(row_chunk).collect();
        let parts: Vec<Tensor<T>> = row_starts
            .par_iter()
            .map(|&s| -> Result<Tensor<T>> {
                let len = row_chunk.min(n - s);
                let part = Tensor::new(vec![len, m, d], e[s * m * d..(s + len) * m * d].to_vec())?;
                self.row.row_interact(&self.params, &part)
            })
            .collect::<Result<_>>()?;
        let mut h = Vec::with_capacity(n * out_dim);
        for p in parts {
            h.extend_from_slice(p.data());
        }
        Tensor::new(vec![n, out_dim], h)
    }

    /// ICL prediction from precomputed row embeddings.
    pub fn predict_from_embeddings(&self, h: &Tensor<T>, y_train: &[usize], classes: usize) -> Result<ClassProbabilities> {
        self.calls.bump_icl();
        self.icl.predict(&self.params, h, y_train, classes)
    }

    /// Full pipeline on one table whose first `y_train.len()` rows are train rows.
    pub fn predict_dataset(&self, x: &Tensor<T>, y_train: &[usize], classes: usize) -> Result<ClassProbabilities> {
        self.predict_dataset_batched(x, y_train, classes, Batching::default())
    }

    pub fn predict_dataset_batched(
        &self,
        x: &Tensor<T>,
        y_train: &[usize],
        classes: usize,
        batching: Batching,
    ) -> Result<ClassProbabilities> {
        if classes > self.config.icl.c_max {
            return Err(Error::Input(format!(
                "{classes} classes exceed c_max={}; use the class tree",
                self.config.icl.c_max
            )));
        }
        let h = self.row_embeddings(x, y_train.len(), batching)?;
        self.predict_from_embeddings(&h, y_train, classes)
    }

    /// Number of distinguishable rows of `H` at tolerance 1e-4, treating all
    /// rows as context.
    pub fn collapse_probe(&self, x: &Tensor<T>) -> Result<usize> {
        let n = x.shape().first().copied().unwrap_or(0);
        let h = self.row_embeddings(x, n, Batching::default())?;
        Ok(count_distinct_rows(&h, 1e-4))
    }

    /// Per-column summary of the final induced representations.
    pub fn column_summaries(&self, x: &Tensor<T>, n_train: usize) -> Result<Vec<Vec<T>>> {
        let induced = self.column.induced(&self.params, x, n_train)?;
        let (m, k, d) = (induced.shape()[0], induced.shape()[1], induced.shape()[2]);
        (0..m)
            .map(|j| {
                let block = Tensor::new(vec![k, d], induced.data()[j * k * d..(j + 1) * k * d].to_vec())?;
                summarize_column(&block)
            })
            .collect()
    }
}

#[cfg(test)]
#[path = "model_tests.rs"]
mod tests;
