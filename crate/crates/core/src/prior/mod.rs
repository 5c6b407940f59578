//! Synthetic classification tasks for pretraining.
//!
//! Every dataset draws its own RNG stream from `(seed, index)`, picks an MLP
//! SCM (probability `scm_fraction`) or a tree SCM, realizes the graph, and
//! discretizes a late node into class labels.

pub mod activation;
pub mod blobs;
pub mod discretize;
pub mod gbdt;
pub mod io;
pub mod scm;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub use activation::ActivationKind;
pub use discretize::discretize_target;
pub use scm::{ScmGraph, TreeScmGraph};

pub const MAX_FEATURES: usize = 100;
pub const MAX_CLASSES: usize = 10;
/// Generation attempts per dataset before giving up.
pub const MAX_ATTEMPTS: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Scm,
    TreeScm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub min_samples: usize,
    pub max_samples: usize,
    pub min_features: usize,
    pub max_features: usize,
    pub min_classes: usize,
    pub max_classes: usize,
    pub scm_fraction: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            min_samples: 64,
            max_samples: 512,
            min_features: 1,
            max_features: MAX_FEATURES,
            min_classes: 2,
            max_classes: MAX_CLASSES,
            scm_fraction: 0.7,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_features == 0 || self.min_features > self.max_features || self.max_features > MAX_FEATURES {
            return bad(format!(
                "features must satisfy 1 <= {} <= {} <= {MAX_FEATURES}",
                self.min_features, self.max_features
            ));
        }
        if self.min_classes < 2 || self.min_classes > self.max_classes || self.max_classes > MAX_CLASSES {
            return bad(format!(
                "classes must satisfy 2 <= {} <= {} <= {MAX_CLASSES}",
                self.min_classes, self.max_classes
            ));
        }
        if self.min_samples > self.max_samples || self.min_samples < 2 * discretize::MIN_PER_CLASS * self.max_classes {
            return bad(format!(
                "samples {}..={} must be ordered and allow {} per class",
                self.min_samples,
                self.max_samples,
                2 * discretize::MIN_PER_CLASS
            ));
        }
        if !(0.0..=1.0).contains(&self.scm_fraction) {
            return bad(format!("scm_fraction {} outside [0, 1]", self.scm_fraction));
        }
        Ok(())
    }

    pub fn sample_shape(&self, rng: &mut impl Rng) -> DatasetShape {
        DatasetShape {
            n: rng.random_range(self.min_samples..=self.max_samples),
            m: rng.random_range(self.min_features..=self.max_features),
            classes: rng.random_range(self.min_classes..=self.max_classes),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetShape {
    pub n: usize,
    pub m: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// `n x m`, row-major.
    pub x: Tensor<f32>,
    pub y: Vec<usize>,
    pub classes: usize,
    pub kind: PriorKind,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn n(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.y {
            if y < self.classes {
                counts[y] += 1;
            }
        }
        counts
    }

    /// Finite values, labels in range, 2..=10 classes and every class seen twice.
    pub fn validate(&self) -> Result<()> {
        if self.x.shape().len() != 2 || self.y.len() != self.n() {
            return Err(Error::Input(format!("{:?} table with {} labels", self.x.shape(), self.y.len())));
        }
        if !self.x.is_finite() {
            return Err(Error::NonFinite { op: "dataset" });
        }
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return Err(Error::Input(format!("{} classes", self.classes)));
        }
        if let Some(&bad) = self.y.iter().find(|&&y| y >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.classes,
            });
        }
        if let Some(c) = self.class_counts().iter().position(|&c| c < discretize::MIN_PER_CLASS) {
            return Err(Error::Degenerate(format!("class {c} has fewer than 2 samples")));
        }
        Ok(())
    }
}

/// One dataset of the given kind and shape. Fails on non-finite graphs or
/// degenerate targets; callers retry with a fresh stream.
pub fn generate(kind: PriorKind, shape: DatasetShape, rng: &mut impl Rng) -> Result<(Tensor<f32>, Vec<usize>)> {
    let realization = match kind {
        PriorKind::Scm => ScmGraph::sample(rng, shape.m + 1).propagate(shape.n, rng)?,
        PriorKind::TreeScm => TreeScmGraph::sample(rng, shape.m + 1).propagate(shape.n, rng)?,
    };
    let (features, target) = realization.select(shape.m, rng)?;
    let mut y = discretize_target(&target, shape.classes, rng)?;
    discretize::shuffle_labels(&mut y, shape.classes, rng);
    let (n, m) = (shape.n, shape.m);
    let x = Tensor::from_fn(vec![n, m], |i| features[i % m][i / m] as f32);
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "dataset_cast" });
    }
    Ok((x, y))
}

/// Dataset `index` of the stream rooted at `config.seed`. `n_samples`
/// overrides the sampled row count.
pub fn sample_dataset(config: &PriorConfig, index: u64, n_samples: Option<usize>) -> Result<SyntheticDataset> {
    let seed = seed::derive(config.seed, index);
    let mut rng = seed::rng(seed);
    let kind = if rng.random_bool(config.scm_fraction) {
        PriorKind::Scm
    } else {
        PriorKind::TreeScm
    };
    let mut shape = config.sample_shape(&mut rng);
    if let Some(n) = n_samples {
        shape.n = n;
    }
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut attempt_rng = seed::rng(seed::derive(seed, attempt));
        match generate(kind, shape, &mut attempt_rng) {
            Ok((x, y)) => {
                return Ok(SyntheticDataset {
                    x,
                    y,
                    classes: shape.classes,
                    kind,
                    seed,
                })
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Degenerate("no attempts".into())))
}

/// Datasets `start..start + batch_size` of the stream; identical regardless of
/// the worker count.
pub fn sample_prior_batch(
    batch_size: usize,
    config: &PriorConfig,
    start: u64,
    n_samples: Option<usize>,
) -> Result<Vec<SyntheticDataset>> {
    config.validate()?;
    (start..start + batch_size as u64)
        .into_par_iter()
        .map(|i| sample_dataset(config, i, n_samples))
        .collect()
}
