//! Per-column preprocessing fitted on train rows only.
//!
//! Missing cells (NaN) are imputed with the train mean. `ZNorm` centers and
//! scales each column; `PowerThenZNorm` first applies a Yeo-Johnson power
//! transform whose exponent maximizes the Gaussian log-likelihood over a grid.
//! Both kinds then squash standardized values beyond `OUTLIER_THRESHOLD`
//! logarithmically so heavy tails stay finite and ordered.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAMBDA_MIN: f64 = -2.0;
pub const LAMBDA_MAX: f64 = 2.0;
pub const LAMBDA_STEPS: usize = 81;
pub const OUTLIER_THRESHOLD: f64 = 4.0;

/// Identity on `[-t, t]`, `sign(z) * (t + ln(1 + |z| - t))` beyond; NaN maps to 0.
pub fn squash_outlier(z: f64) -> f64 {
    if z.is_nan() {
        return 0.0;
    }
    let a = z.abs().min(f64::MAX);
    if a <= OUTLIER_THRESHOLD {
        z
    } else {
        (OUTLIER_THRESHOLD + (a - OUTLIER_THRESHOLD).ln_1p()).copysign(z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessKind {
    #[serde(rename = "znorm")]
    ZNorm,
    #[serde(rename = "power_then_znorm")]
    PowerThenZNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub impute: f64,
    pub lambda: Option<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub kind: PreprocessKind,
    pub columns: Vec<ColumnStats>,
}

/// Yeo-Johnson transform: a Box-Cox-type family extended to negative inputs.
pub fn yeo_johnson(x: f64, lambda: f64) -> f64 {
    const EPS: f64 = 1e-12;
    if x >= 0.0 {
        if lambda.abs() < EPS {
            x.ln_1p()
        } else {
            ((x + 1.0).powf(lambda) - 1.0) / lambda
        }
    } else if (lambda - 2.0).abs() < EPS {
        -(-x).ln_1p()
    } else {
        -((1.0 - x).powf(2.0 - lambda) - 1.0) / (2.0 - lambda)
    }
}

/// Profile Gaussian log-likelihood of the transformed sample (up to constants).
fn yeo_johnson_log_likelihood(x: &[f64], lambda: f64) -> f64 {
    let n = x.len() as f64;
    let t: Vec<f64> = x.iter().map(|&v| yeo_johnson(v, lambda)).collect();
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) || !var.is_finite() {
        return f64::NEG_INFINITY;
    }
    let jacobian: f64 = x.iter().map(|&v| v.signum() * v.abs().ln_1p()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * jacobian
}

/// Best exponent on an evenly spaced grid over `[-2, 2]`.
pub fn fit_lambda(x: &[f64]) -> f64 {
    let mut best = (1.0, f64::NEG_INFINITY);
    for i in 0..LAMBDA_STEPS {
        let lambda = LAMBDA_MIN + (LAMBDA_MAX - LAMBDA_MIN) * i as f64 / (LAMBDA_STEPS - 1) as f64;
        let ll = yeo_johnson_log_likelihood(x, lambda);
        if ll > best.1 {
            best = (lambda, ll);
        }
    }
    best.0
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    // Rounding in the mean leaves a residual spread on constant columns.
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        (mean, 0.0)
    } else {
        (mean, std)
    }
}

impl Preprocessor {
    /// Fits on the first `n_train` rows of the `n x m` table `x`.
    pub fn fit(x: &Tensor<f32>, n_train: usize, kind: PreprocessKind) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::shape("preprocess", format!("{:?}", x.shape())));
        }
        let m = x.shape()[1];
        if n_train == 0 || n_train > x.shape()[0] {
            return Err(Error::Input(format!("cannot fit preprocessing on {n_train} train rows")));
        }
        let data = x.data();
        let columns = (0..m)
            .map(|j| {
                let observed: Vec<f64> = (0..n_train)
                    .map(|i| data[i * m + j] as f64)
                    .filter(|v| v.is_finite())
                    .collect();
                let impute = if observed.is_empty() {
                    0.0
                } else {
                    observed.iter().sum::<f64>() / observed.len() as f64
                };
                let filled: Vec<f64> = (0..n_train)
                    .map(|i| {
                        let v = data[i * m + j] as f64;
                        if v.is_finite() {
                            v
                        } else {
                            impute
                        }
                    })
                    .collect();
                let (lambda, transformed) = match kind {
                    PreprocessKind::ZNorm => (None, filled),
                    PreprocessKind::PowerThenZNorm => {
                        let lambda = fit_lambda(&filled);
                        (Some(lambda), filled.iter().map(|&v| yeo_johnson(v, lambda)).collect())
                    }
                };
                let (mean, std) = mean_std(&transformed);
                ColumnStats { impute, lambda, mean, std }
            })
            .collect();
        Ok(Preprocessor { kind, columns })
    }

    pub fn transform_value(&self, j: usize, v: f32) -> f32 {
        let c = &self.columns[j];
        let mut v = if v.is_finite() { v as f64 } else { c.impute };
        if let Some(lambda) = c.lambda {
            v = yeo_johnson(v, lambda);
        }
        let z = if c.std > 0.0 && c.std.is_finite() { (v - c.mean) / c.std } else { 0.0 };
        squash_outlier(z) as f32
    }

    pub fn transform(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let m = self.columns.len();
        if x.shape().len() != 2 || x.shape()[1] != m {
            return Err(Error::shape("preprocess", format!("{:?} for {m} fitted columns", x.shape())));
        }
        Ok(Tensor::from_fn(x.shape().to_vec(), |i| self.transform_value(i % m, x.data()[i])))
    }
}
