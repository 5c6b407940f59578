//! Peak activation memory model and batch planner.
//!
//! `MEM = a1·batch + a2·seq + a3·batch·seq + a4` (MB) per transformer.
//! For the column transformer batch counts features and seq counts samples;
//! for the row transformer batch counts samples and seq counts features; for
//! the ICL transformer batch counts datasets and seq counts samples.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Col,
    Row,
    Icl,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Col, Stage::Row, Stage::Icl];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

impl Coefficients {
    pub fn estimate(&self, batch: f64, seq: f64) -> f64 {
        self.a1 * batch + self.a2 * seq + self.a3 * batch * seq + self.a4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub col: Coefficients,
    pub row: Coefficients,
    pub icl: Coefficients,
}

impl Default for MemoryModel {
    /// Fits measured on a 40 GB A100.
    fn default() -> Self {
        MemoryModel {
            col: Coefficients {
                a1: 0.0708,
                a2: 7.29e-6,
                a3: 0.00391,
                a4: 137.62,
            },
            row: Coefficients {
                a1: -2.07e-5,
                a2: 2.27e-4,
                a3: 0.00537,
                a4: 138.54,
            },
            icl: Coefficients {
                a1: -0.260,
                a2: 4.77e-7,
                a3: 0.0195,
                a4: 140.58,
            },
        }
    }
}

impl MemoryModel {
    pub fn coefficients(&self, stage: Stage) -> &Coefficients {
        match stage {
            Stage::Col => &self.col,
            Stage::Row => &self.row,
            Stage::Icl => &self.icl,
        }
    }

    /// Estimated peak MB.
    pub fn estimate(&self, stage: Stage, batch: usize, seq: usize) -> f64 {
        self.coefficients(stage).estimate(batch as f64, seq as f64)
    }

    /// Largest batch whose estimate fits in `budget_mb`.
    pub fn plan_batch(&self, stage: Stage, seq: usize, budget_mb: f64) -> Result<usize> {
        if seq == 0 {
            return Err(Error::Input("sequence length must be at least 1".into()));
        }
        let c = self.coefficients(stage);
        let s = seq as f64;
        let required = self.estimate(stage, 1, seq);
        if !(budget_mb >= required) {
            return Err(Error::BudgetTooSmall {
                budget_mb,
                required_mb: required,
            });
        }
        let slope = c.a1 + c.a3 * s;
        if !(slope > 0.0) {
            return Err(Error::Config(format!(
                "{stage:?} memory does not grow with batch at seq={seq}; no finite plan"
            )));
        }
        let mut b = (((budget_mb - c.a2 * s - c.a4) / slope).floor() as usize).max(1);
        // Correct for rounding at the boundary of the closed form.
        while b > 1 && self.estimate(stage, b, seq) > budget_mb {
            b -= 1;
        }
        while self.estimate(stage, b + 1, seq) <= budget_mb {
            b += 1;
        }
        Ok(b)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
