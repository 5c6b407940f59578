//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icl::ClassProbabilities;

pub const LOG_LOSS_EPS: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Macro one-vs-rest ROC AUC; `None` when fewer than two classes occur.
    pub auc_ovr: Option<f64>,
    pub log_loss: f64,
}

fn check(probs: &ClassProbabilities, y: &[usize]) -> Result<()> {
    if probs.rows != y.len() || y.is_empty() {
        return Err(Error::Input(format!("{} labels for {} prediction rows", y.len(), probs.rows)));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= probs.classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: probs.classes,
        });
    }
    Ok(())
}

pub fn accuracy(probs: &ClassProbabilities, y: &[usize]) -> Result<f64> {
    check(probs, y)?;
    let hits = probs.argmax().iter().zip(y).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Mean negative log-probability of the true class, clipped to `[1e-15, 1 - 1e-15]`.
pub fn log_loss(probs: &ClassProbabilities, y: &[usize]) -> Result<f64> {
    check(probs, y)?;
    let total: f64 = y
        .iter()
        .enumerate()
        .map(|(i, &c)| -(probs.row(i)[c] as f64).clamp(LOG_LOSS_EPS, 1.0 - LOG_LOSS_EPS).ln())
        .sum();
    Ok(total / y.len() as f64)
}

/// Binary ROC AUC via the Mann-Whitney statistic with midranks for ties.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| positive[order[k]]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Unweighted mean of one-vs-rest AUCs over classes that have both
/// positives and negatives; `None` if fewer than two classes occur.
pub fn auc_ovr(probs: &ClassProbabilities, y: &[usize]) -> Result<Option<f64>> {
    check(probs, y)?;
    let aucs: Vec<f64> = (0..probs.classes)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter_rows().map(|r| r[c] as f64).collect();
            let positive: Vec<bool> = y.iter().map(|&t| t == c).collect();
            binary_auc(&scores, &positive)
        })
        .collect();
    Ok(if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    })
}

pub fn evaluate(probs: &ClassProbabilities, y: &[usize]) -> Result<Metrics> {
    Ok(Metrics {
        accuracy: accuracy(probs, y)?,
        auc_ovr: auc_ovr(probs, y)?,
        log_loss: log_loss(probs, y)?,
    })
}
