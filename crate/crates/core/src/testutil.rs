//! Shared helpers for unit tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::column::ColumnEmbedderConfig;
use crate::icl::IclConfig;
use crate::model::ModelConfig;
use crate::row::RowInteractorConfig;
use crate::seed;
use crate::tensor::{Scalar, Tensor};

pub fn randn<T: Scalar>(shape: Vec<usize>, seed: u64) -> Tensor<T> {
    let mut rng = seed::rng(seed);
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// A very small model for fast invariant checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        column: ColumnEmbedderConfig {
            d: 8,
            k_inducing: 4,
            n_isab: 2,
            heads: 2,
        },
        row: RowInteractorConfig {
            layers: 2,
            heads: 2,
            d: 8,
            n_cls: 2,
            ..RowInteractorConfig::default()
        },
        icl: IclConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            c_max: 10,
            head_hidden: 16,
        },
    }
}
