//! Train/test partition of a synthetic dataset for the in-context objective.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::infer::preprocess::{PreprocessKind, Preprocessor};
use crate::tensor::Tensor;

pub const MIN_TRAIN_FRACTION: f64 = 0.3;
pub const MAX_TRAIN_FRACTION: f64 = 0.9;
pub const MAX_SPLIT_ATTEMPTS: usize = 10;
pub const MIN_SPLIT_ROWS: usize = 10;

/// A task ready for the model: train rows first, then test rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub x: Tensor<f32>,
    pub y_train: Vec<usize>,
    pub y_test: Vec<usize>,
    pub classes: usize,
}

impl Task {
    pub fn n(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn n_train(&self) -> usize {
        self.y_train.len()
    }
}

fn covers(labels: &[usize], classes: usize) -> bool {
    let mut seen = vec![false; classes];
    for &y in labels {
        seen[y] = true;
    }
    seen.into_iter().all(|s| s)
}

/// Row order (train indices, test indices) with a train fraction drawn from
/// `U[0.3, 0.9]`. Resamples up to 10 times until both parts contain every class.
pub fn split_indices(y: &[usize], classes: usize, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = y.len();
    if n < MIN_SPLIT_ROWS {
        return Err(Error::Input(format!("cannot split {n} rows; need at least {MIN_SPLIT_ROWS}")));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        let fraction = rng.random_range(MIN_TRAIN_FRACTION..=MAX_TRAIN_FRACTION);
        let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let (train, test) = order.split_at(n_train);
        let y_train: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let y_test: Vec<usize> = test.iter().map(|&i| y[i]).collect();
        if covers(&y_train, classes) && covers(&y_test, classes) {
            return Ok((train.to_vec(), test.to_vec()));
        }
    }
    Err(Error::Degenerate(format!(
        "no split in {MAX_SPLIT_ATTEMPTS} attempts puts all {classes} classes in both parts"
    )))
}

/// Splits, reorders train rows first and z-normalizes with train statistics.
pub fn split_dataset(x: &Tensor<f32>, y: &[usize], classes: usize, rng: &mut impl Rng) -> Result<Task> {
    let (train, test) = split_indices(y, classes, rng)?;
    let m = x.shape()[1];
    let order: Vec<usize> = train.iter().chain(&test).copied().collect();
    let mut data = Vec::with_capacity(order.len() * m);
    for &i in &order {
        data.extend_from_slice(&x.data()[i * m..(i + 1) * m]);
    }
    let reordered = Tensor::new(vec![order.len(), m], data)?;
    let pre = Preprocessor::fit(&reordered, train.len(), PreprocessKind::ZNorm)?;
    Ok(Task {
        x: pre.transform(&reordered)?,
        y_train: train.iter().map(|&i| y[i]).collect(),
        y_test: test.iter().map(|&i| y[i]).collect(),
        classes,
    })
}
