//! Continuous target → class labels via random quantile cuts.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Cut-point draws before giving up on a target.
pub const MAX_CUT_ATTEMPTS: usize = 10;
/// Minimum samples per class.
pub const MIN_PER_CLASS: usize = 2;

/// Linear-interpolated quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Label = number of cut points strictly below the value.
pub fn labels_from_cuts(t: &[f64], cuts: &[f64]) -> Vec<usize> {
    t.iter().map(|&v| cuts.iter().filter(|&&c| v > c).count()).collect()
}

/// `classes - 1` sorted quantile levels with every gap (including the two
/// ends) at least `gap`.
fn quantile_levels(classes: usize, gap: f64, rng: &mut impl Rng) -> Vec<f64> {
    let slack = 1.0 - classes as f64 * gap;
    let mut u: Vec<f64> = (0..classes - 1).map(|_| rng.random_range(0.0..=slack)).collect();
    u.sort_by(f64::total_cmp);
    u.iter().enumerate().map(|(k, v)| v + (k + 1) as f64 * gap).collect()
}

/// Labels in `0..classes` with at least two samples each, drawn from random
/// quantile cuts of `t`. Retries cut points up to [`MAX_CUT_ATTEMPTS`] times.
pub fn discretize_target(t: &[f64], classes: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if t.len() < MIN_PER_CLASS * classes {
        return Err(Error::Input(format!("{} samples cannot fill {classes} classes", t.len())));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite target".into()));
    }
    let mut sorted = t.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::Degenerate("constant target".into()));
    }
    // Leave room for two samples per class at the quantile level.
    let gap = (1.0 / (2.0 * classes as f64)).max((MIN_PER_CLASS + 1) as f64 / t.len() as f64);
    let gap = gap.min(1.0 / classes as f64);
    for _ in 0..MAX_CUT_ATTEMPTS {
        let cuts: Vec<f64> = quantile_levels(classes, gap, rng)
            .into_iter()
            .map(|q| quantile(&sorted, q))
            .collect();
        let labels = labels_from_cuts(t, &cuts);
        let mut counts = vec![0usize; classes];
        for &y in &labels {
            counts[y] += 1;
        }
        if counts.iter().all(|&c| c >= MIN_PER_CLASS) {
            return Ok(labels);
        }
    }
    Err(Error::Degenerate(format!(
        "no cut points gave every one of {classes} classes {MIN_PER_CLASS} samples"
    )))
}

/// Applies a uniformly random relabeling of `0..classes`.
pub fn shuffle_labels(labels: &mut [usize], classes: usize, rng: &mut impl Rng) {
    let mut perm: Vec<usize> = (0..classes).collect();
    perm.shuffle(rng);
    for y in labels {
        *y = perm[*y];
    }
}
