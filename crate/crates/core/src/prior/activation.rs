//! Activation layers of the MLP-style SCM prior.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of random features in the random Fourier activation.
pub const FOURIER_FEATURES: usize = 256;
/// Sampling weight of the random Fourier activation relative to every other kind.
pub const FOURIER_WEIGHT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Identity,
    Tanh,
    LeakyRelu,
    Elu,
    Relu,
    Relu6,
    Selu,
    Silu,
    Softplus,
    Hardtanh,
    Sign,
    Sine,
    Rbf,
    Exp,
    SqrtAbs,
    IndicatorUnitInterval,
    Square,
    Abs,
    RandomFourier,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 19] = [
        ActivationKind::Identity,
        ActivationKind::Tanh,
        ActivationKind::LeakyRelu,
        ActivationKind::Elu,
        ActivationKind::Relu,
        ActivationKind::Relu6,
        ActivationKind::Selu,
        ActivationKind::Silu,
        ActivationKind::Softplus,
        ActivationKind::Hardtanh,
        ActivationKind::Sign,
        ActivationKind::Sine,
        ActivationKind::Rbf,
        ActivationKind::Exp,
        ActivationKind::SqrtAbs,
        ActivationKind::IndicatorUnitInterval,
        ActivationKind::Square,
        ActivationKind::Abs,
        ActivationKind::RandomFourier,
    ];

    pub fn sampling_weight(self) -> f64 {
        if self == ActivationKind::RandomFourier {
            FOURIER_WEIGHT
        } else {
            1.0
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let total: f64 = Self::ALL.iter().map(|k| k.sampling_weight()).sum();
        let mut r = rng.random_range(0.0..total);
        for k in Self::ALL {
            r -= k.sampling_weight();
            if r < 0.0 {
                return k;
            }
        }
        ActivationKind::RandomFourier
    }

    /// Pointwise value. The random Fourier kind needs sampled parameters and
    /// is evaluated through [`RandomFourier::eval`] instead.
    pub fn apply(self, x: f64) -> f64 {
        const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
        const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
        match self {
            ActivationKind::Identity | ActivationKind::RandomFourier => x,
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    0.01 * x
                }
            }
            ActivationKind::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Relu6 => x.clamp(0.0, 6.0),
            ActivationKind::Selu => {
                SELU_SCALE
                    * if x > 0.0 {
                        x
                    } else {
                        SELU_ALPHA * x.exp_m1()
                    }
            }
            ActivationKind::Silu => x / (1.0 + (-x).exp()),
            ActivationKind::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            ActivationKind::Hardtanh => x.clamp(-1.0, 1.0),
            ActivationKind::Sign => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Sine => x.sin(),
            ActivationKind::Rbf => (-x * x).exp(),
            ActivationKind::Exp => x.exp(),
            ActivationKind::SqrtAbs => x.abs().sqrt(),
            ActivationKind::IndicatorUnitInterval => {
                if x.abs() <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Square => x * x,
            ActivationKind::Abs => x.abs(),
        }
    }
}

/// Random function `f(x) = (w/‖w‖ ⊙ sin(a x + b))ᵀ z`, a Gaussian-process
/// sample with a random spectral decay.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomFourier {
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,
    /// Normalized amplitudes `w / ‖w‖₂`.
    pub amplitudes: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub decay: f64,
}

impl RandomFourier {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let n = FOURIER_FEATURES;
        let phase = Uniform::new(0.0, 2.0 * PI).expect("valid range");
        let freq = Uniform::new(0.0, n as f64).expect("valid range");
        let u: f64 = rng.random_range(0.7..3.0);
        let decay = u.exp();
        let phases: Vec<f64> = (0..n).map(|_| phase.sample(rng)).collect();
        // Reflect onto (0, N] so a zero frequency cannot blow up a^(-e^u).
        let frequencies: Vec<f64> = (0..n).map(|_| n as f64 - freq.sample(rng)).collect();
        let raw: Vec<f64> = frequencies.iter().map(|a| a.powf(-decay)).collect();
        let norm = raw.iter().map(|w| w * w).sum::<f64>().sqrt();
        let amplitudes = raw.iter().map(|w| w / norm).collect();
        let coefficients = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        RandomFourier {
            frequencies,
            phases,
            amplitudes,
            coefficients,
            decay,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.frequencies
            .iter()
            .zip(&self.phases)
            .zip(self.amplitudes.iter().zip(&self.coefficients))
            .map(|((a, b), (w, z))| w * (a * x + b).sin() * z)
            .sum()
    }
}

/// Per-layer random rescaling `x ← exp(2a)(x + b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rescale {
    pub log_scale: f64,
    pub shift: f64,
}

impl Rescale {
    pub const NONE: Rescale = Rescale {
        log_scale: 0.0,
        shift: 0.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Rescale {
            log_scale: StandardNormal.sample(rng),
            shift: StandardNormal.sample(rng),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (2.0 * self.log_scale).exp() * (x + self.shift)
    }
}

/// Standardizes each of the `width` columns of a row-major batch with the
/// biased variance. Constant columns become zero.
pub fn standardize_columns(x: &mut [f64], width: usize) {
    if width == 0 {
        return;
    }
    let n = x.len() / width;
    for j in 0..width {
        let mean = (0..n).map(|i| x[i * width + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * width + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for i in 0..n {
            let v = &mut x[i * width + j];
            *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
        }
    }
}

/// Standardize, rescale, then activate a `batch x width` block in place. The
/// random Fourier kind skips the rescale and consumes `fourier`.
pub fn activation_layer(
    x: &mut [f64],
    width: usize,
    kind: ActivationKind,
    rescale: Rescale,
    fourier: Option<&RandomFourier>,
) -> Result<()> {
    if width == 0 || x.len() % width != 0 {
        return Err(Error::Input(format!("{} values do not form rows of width {width}", x.len())));
    }
    if x.len() / width < 2 {
        return Err(Error::Input("activation layer needs a batch of at least 2".into()));
    }
    standardize_columns(x, width);
    match (kind, fourier) {
        (ActivationKind::RandomFourier, Some(f)) => {
            for v in x.iter_mut() {
                *v = f.eval(*v);
            }
        }
        (ActivationKind::RandomFourier, None) => {
            return Err(Error::Config("random Fourier activation without parameters".into()));
        }
        _ => {
            for v in x.iter_mut() {
                *v = kind.apply(rescale.apply(*v));
            }
        }
    }
    Ok(())
}
