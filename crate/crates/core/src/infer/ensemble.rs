//! Ensembles over column orders, class relabelings and preprocessors.
//!
//! Member `i` permutes the feature columns, relabels the classes, fits its
//! preprocessor on the train rows, predicts, and maps the probabilities back
//! to the original class order. Members are averaged in probability space.
//! Member 0 sees the data unpermuted with z-normalization.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::memory::{MemoryModel, Stage};
use super::preprocess::{PreprocessKind, Preprocessor};
use crate::class_tree::predict_hierarchical;
use crate::error::{Error, Result};
use crate::icl::ClassProbabilities;
use crate::model::{Batching, TabIcl};
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_MEMBERS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub members: usize,
    pub seed: u64,
    /// Memory budget used to chunk columns and rows; `None` runs each stage in one pass.
    pub memory_budget_mb: Option<f64>,
    #[serde(default)]
    pub memory_model: MemoryModel,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: DEFAULT_MEMBERS,
            seed: 0,
            memory_budget_mb: None,
            memory_model: MemoryModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSpec {
    /// New column `j` is original column `column_perm[j]`.
    pub column_perm: Vec<usize>,
    /// Original class `c` is presented as `class_perm[c]`.
    pub class_perm: Vec<usize>,
    pub preprocess: PreprocessKind,
}

impl MemberSpec {
    pub fn identity(m: usize, classes: usize, preprocess: PreprocessKind) -> Self {
        MemberSpec {
            column_perm: (0..m).collect(),
            class_perm: (0..classes).collect(),
            preprocess,
        }
    }
}

/// Members alternate between the two preprocessors, so an even member count
/// splits evenly.
pub fn member_specs(config: &EnsembleConfig, m: usize, classes: usize) -> Vec<MemberSpec> {
    (0..config.members)
        .map(|i| {
            let preprocess = if i % 2 == 0 {
                PreprocessKind::ZNorm
            } else {
                PreprocessKind::PowerThenZNorm
            };
            if i == 0 {
                return MemberSpec::identity(m, classes, preprocess);
            }
            let mut rng = seed::rng(seed::derive(seed::derive_named(config.seed, "ensemble"), i as u64));
            let mut column_perm: Vec<usize> = (0..m).collect();
            column_perm.shuffle(&mut rng);
            let mut class_perm: Vec<usize> = (0..classes).collect();
            class_perm.shuffle(&mut rng);
            MemberSpec {
                column_perm,
                class_perm,
                preprocess,
            }
        })
        .collect()
}

/// Column and row chunk sizes from the memory model for an `n x m` table.
pub fn plan_batching(config: &EnsembleConfig, n: usize, m: usize, n_cls: usize) -> Result<Batching> {
    let Some(budget) = config.memory_budget_mb else {
        return Ok(Batching::default());
    };
    let mem = &config.memory_model;
    Ok(Batching {
        column_chunk: Some(mem.plan_batch(Stage::Col, n, budget)?),
        row_chunk: Some(mem.plan_batch(Stage::Row, m + n_cls, budget)?),
    })
}

fn permute_columns(x: &Tensor<f32>, perm: &[usize]) -> Result<Tensor<f32>> {
    let (n, m) = (x.shape()[0], x.shape()[1]);
    Tensor::new(
        vec![n, m],
        (0..n * m).map(|i| x.data()[(i / m) * m + perm[i % m]]).collect(),
    )
}

/// One member: `x` holds train rows first, with missing cells as NaN.
pub fn predict_member(
    model: &TabIcl<f32>,
    x: &Tensor<f32>,
    y_train: &[usize],
    classes: usize,
    spec: &MemberSpec,
    batching: Batching,
) -> Result<ClassProbabilities> {
    let n_train = y_train.len();
    let permuted = permute_columns(x, &spec.column_perm)?;
    let pre = Preprocessor::fit(&permuted, n_train, spec.preprocess)?;
    let xz = pre.transform(&permuted)?;
    let relabeled: Vec<usize> = y_train.iter().map(|&y| spec.class_perm[y]).collect();
    let probs = if classes <= model.config.icl.c_max {
        model.predict_dataset_batched(&xz, &relabeled, classes, batching)?
    } else {
        predict_hierarchical(model, &xz, &relabeled, classes, batching)?
    };
    let mut data = Vec::with_capacity(probs.data.len());
    for row in probs.iter_rows() {
        data.extend(spec.class_perm.iter().map(|&p| row[p]));
    }
    ClassProbabilities::new(probs.rows, classes, data)
}

/// Averaged member probabilities for the test rows of `x` (train rows first).
pub fn ensemble_predict(
    model: &TabIcl<f32>,
    x: &Tensor<f32>,
    y_train: &[usize],
    classes: usize,
    config: &EnsembleConfig,
) -> Result<ClassProbabilities> {
    if classes < 2 {
        return Err(Error::Degenerate(format!("{classes} classes")));
    }
    if config.members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    if x.shape().len() != 2 || y_train.len() >= x.shape()[0] {
        return Err(Error::Input(format!(
            "{:?} table with {} train rows leaves no test rows",
            x.shape(),
            y_train.len()
        )));
    }
    if let Some(&bad) = y_train.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let (n, m) = (x.shape()[0], x.shape()[1]);
    let batching = plan_batching(config, n, m, model.config.row.n_cls)?;
    let specs = member_specs(config, m, classes);
    let members = specs
        .par_iter()
        .map(|spec| predict_member(model, x, y_train, classes, spec, batching))
        .collect::<Result<Vec<_>>>()?;
    if members.len() == 1 {
        return Ok(members.into_iter().next().expect("one member"));
    }
    let rows = members[0].rows;
    let mut acc = vec![0f64; rows * classes];
    for p in &members {
        for (a, &v) in acc.iter_mut().zip(&p.data) {
            *a += v as f64;
        }
    }
    let k = members.len() as f64;
    ClassProbabilities::new(rows, classes, acc.into_iter().map(|v| (v / k) as f32).collect())
}
