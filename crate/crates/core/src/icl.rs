//! Dataset-wise in-context prediction.
//!
//! Train labels are projected from a one-hot code and added to the train
//! rows of `H`. A stack of attention blocks then runs with keys restricted to
//! train rows, and a two-layer head maps each test row to `c_max` logits of
//! which only the first `C` are live.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{AttentionBlock, LayerNorm, Linear};
use crate::tensor::{softmax_in_place, AttentionMask, Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IclConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub c_max: usize,
    pub head_hidden: usize,
}

impl Default for IclConfig {
    fn default() -> Self {
        IclConfig {
            layers: 12,
            heads: 4,
            model_dim: 512,
            c_max: 10,
            head_hidden: 512,
        }
    }
}

impl IclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "icl: model_dim={} not divisible by heads={}",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 || self.c_max < 2 || self.head_hidden == 0 {
            return Err(Error::Config("icl needs layers >= 1, c_max >= 2, head_hidden >= 1".into()));
        }
        Ok(())
    }
}

/// Class probabilities for test rows, `rows x classes`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities {
    pub rows: usize,
    pub classes: usize,
    pub data: Vec<f32>,
}

impl ClassProbabilities {
    pub fn new(rows: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * classes {
            return Err(Error::shape("class_probabilities", format!("{rows}x{classes} from {}", data.len())));
        }
        Ok(ClassProbabilities { rows, classes, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.classes.max(1))
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.iter_rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                    .0
            })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &ClassProbabilities) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max)
    }
}

/// Softmax over the first `classes` logits of each row; the rest get zero.
pub fn masked_probabilities<T: Scalar>(logits: &Tensor<T>, classes: usize) -> Result<ClassProbabilities> {
    let k = logits.last_dim();
    if classes == 0 || classes > k {
        return Err(Error::Input(format!("{classes} classes for {k} logits")));
    }
    let rows = logits.numel() / k;
    let mut data = Vec::with_capacity(rows * classes);
    for row in logits.rows() {
        let mut p: Vec<T> = row[..classes].to_vec();
        softmax_in_place(&mut p);
        data.extend(p.into_iter().map(|v| v.as_f64() as f32));
    }
    ClassProbabilities::new(rows, classes, data)
}

/// `[n, c_max]` one-hot codes.
pub fn one_hot<T: Scalar>(labels: &[usize], c_max: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= c_max) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c_max });
    }
    Ok(Tensor::from_fn(vec![labels.len(), c_max], |i| {
        if labels[i / c_max] == i % c_max {
            T::one()
        } else {
            T::zero()
        }
    }))
}

#[derive(Clone, Debug)]
pub struct IclPredictor {
    pub config: IclConfig,
    pub label_proj: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub norm_out: LayerNorm,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl IclPredictor {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, config: IclConfig, rng: &mut impl Rng) -> Self {
        let d = config.model_dim;
        IclPredictor {
            label_proj: Linear::new(store, &format!("{prefix}.label_proj"), config.c_max, d, true, rng),
            blocks: (0..config.layers)
                .map(|i| AttentionBlock::new(store, &format!("{prefix}.block{i}"), d, config.heads, false, rng))
                .collect(),
            norm_out: LayerNorm::new(store, &format!("{prefix}.norm_out"), d),
            head_hidden: Linear::new(store, &format!("{prefix}.head_hidden"), d, config.head_hidden, true, rng),
            head_out: Linear::new(store, &format!("{prefix}.head_out"), config.head_hidden, config.c_max, true, rng),
            config,
        }
    }

    /// Adds the projected one-hot label of each train row to the first
    /// `y_train.len()` rows of `h` (`[n, D]`). Test rows pass through untouched.
    pub fn fuse_labels<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        y_train: &[usize],
        classes: usize,
    ) -> Result<Var> {
        if classes < 2 || classes > self.config.c_max {
            return Err(Error::Input(format!(
                "{classes} classes outside 2..={}; use the class tree beyond c_max",
                self.config.c_max
            )));
        }
        if let Some(&bad) = y_train.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let codes = g.input(one_hot(y_train, self.config.c_max)?);
        let labels = self.label_proj.forward(g, store, codes)?;
        g.add_prefix_rows(h, labels)
    }

    /// Logits `[n_test, c_max]` for the rows after the first `n_train`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: Var, n_train: usize) -> Result<Var> {
        let shape = g.shape(fused).to_vec();
        if shape.len() != 2 || shape[1] != self.config.model_dim {
            return Err(Error::shape("icl_forward", format!("expected [n, {}], got {shape:?}", self.config.model_dim)));
        }
        let n = shape[0];
        if n_train == 0 {
            return Err(Error::Input("empty train set".into()));
        }
        if n_train >= n {
            return Err(Error::Input("no test rows to predict".into()));
        }
        let mask = AttentionMask::KeyPrefix(n_train);
        let mut x = g.reshape(fused, vec![1, n, self.config.model_dim])?;
        for block in &self.blocks {
            x = block.forward(g, store, x, None, &mask, None)?;
        }
        let x = self.norm_out.forward(g, store, x)?;
        let test = g.slice1(x, n_train, n - n_train)?;
        let hidden = self.head_hidden.forward(g, store, test)?;
        let hidden = g.gelu(hidden);
        let logits = self.head_out.forward(g, store, hidden)?;
        g.reshape(logits, vec![n - n_train, self.config.c_max])
    }

    /// Inference on row embeddings `h` (`[n, D]`), train rows first.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
        y_train: &[usize],
        classes: usize,
    ) -> Result<ClassProbabilities> {
        let mut g = Graph::inference();
        let hv = g.input(h.clone());
        let fused = self.fuse_labels(&mut g, store, hv, y_train, classes)?;
        let logits = self.forward(&mut g, store, fused, y_train.len())?;
        g.check_finite()?;
        masked_probabilities(g.value(logits), classes)
    }
}

#[cfg(test)]
#[path = "icl_tests.rs"]
mod tests;
