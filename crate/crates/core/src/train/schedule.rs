//! Learning-rate laws.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `(lr_init - lr_end) (1 - step/T)^2 + lr_end`, then `lr_end` after `T`.
    Polynomial { lr_init: f64, lr_end: f64, total_steps: u64 },
    /// Half-cosine from `peak` to `floor` every `period` steps; each restart
    /// multiplies the peak by `decay`.
    CosineWithRestarts { peak: f64, floor: f64, period: u64, decay: f64 },
    Constant { lr: f64 },
}

pub const POLY_LR_INIT: f64 = 2e-5;
pub const POLY_LR_END: f64 = 5e-6;
pub const POLY_TOTAL_STEPS: u64 = 2000;
pub const COSINE_PEAK: f64 = 2e-4;
pub const COSINE_FLOOR: f64 = 1e-5;
pub const COSINE_DECAY: f64 = 0.8;
pub const COSINE_PERIOD_DESK: u64 = 1500;
pub const COSINE_PERIOD_PAPER: u64 = 20000;
/// The small desk model needs a larger step to leave the prior-only plateau.
pub const COSINE_PEAK_DESK: f64 = 1e-3;
pub const COSINE_FLOOR_DESK: f64 = 1e-4;

impl LrSchedule {
    pub fn polynomial() -> Self {
        LrSchedule::Polynomial {
            lr_init: POLY_LR_INIT,
            lr_end: POLY_LR_END,
            total_steps: POLY_TOTAL_STEPS,
        }
    }

    pub fn cosine(period: u64) -> Self {
        LrSchedule::CosineWithRestarts {
            peak: COSINE_PEAK,
            floor: COSINE_FLOOR,
            period,
            decay: COSINE_DECAY,
        }
    }

    pub fn cosine_desk(period: u64) -> Self {
        LrSchedule::CosineWithRestarts {
            peak: COSINE_PEAK_DESK,
            floor: COSINE_FLOOR_DESK,
            period,
            decay: COSINE_DECAY,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Polynomial { lr_init, lr_end, total_steps } => {
                if step >= total_steps || total_steps == 0 {
                    return lr_end;
                }
                let r = 1.0 - step as f64 / total_steps as f64;
                (lr_init - lr_end) * r * r + lr_end
            }
            LrSchedule::CosineWithRestarts { peak, floor, period, decay } => {
                let period = period.max(1);
                let cycle = step / period;
                let t = (step % period) as f64 / period as f64;
                let top = peak * decay.powi(cycle.min(i32::MAX as u64) as i32);
                floor + (top - floor).max(0.0) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::Constant { lr } => lr,
        }
    }
}
