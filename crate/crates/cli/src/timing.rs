//! Runtime law `time = alpha + beta * x^gamma` with `x = n * m * (n + m)`.

use serde::{Deserialize, Serialize};

pub const GAMMA: f64 = 0.8;
const COARSE_POINTS: usize = 61;
const FINE_POINTS: usize = 21;
const REFINE_ROUNDS: usize = 80;

/// Cost proxy for a table of `n` rows and `m` features.
pub fn complexity(n: usize, m: usize) -> f64 {
    (n as u128 * m as u128 * (n as u128 + m as u128)) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub n: usize,
    pub m: usize,
    pub x: f64,
    pub seconds: f64,
}

impl TimingRecord {
    pub fn new(n: usize, m: usize, seconds: f64) -> Self {
        TimingRecord {
            n,
            m,
            x: complexity(n, m),
            seconds,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeLaw {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl TimeLaw {
    pub fn predict(&self, x: f64) -> f64 {
        self.alpha + self.beta * x.powf(self.gamma)
    }

    /// Mean squared error between log times and log predictions.
    pub fn msle(&self, records: &[TimingRecord]) -> f64 {
        let total: f64 = records.iter().map(|r| self.log_residual(r).powi(2)).sum();
        total / records.len() as f64
    }

    pub fn log_residual(&self, r: &TimingRecord) -> f64 {
        r.seconds.ln() - self.predict(r.x).ln()
    }
}

fn grid(lo: f64, hi: f64, points: usize) -> impl Iterator<Item = f64> {
    (0..points).map(move |i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
}

/// Least-squares fit in log space over `(ln alpha, ln beta)` with `gamma`
/// fixed: a coarse grid spanning the data's scales, then repeated zooms.
pub fn fit_time_law(records: &[TimingRecord], gamma: f64) -> Result<TimeLaw, String> {
    if records.len() < 4 {
        return Err(format!("need at least 4 timings, got {}", records.len()));
    }
    if let Some(r) = records.iter().find(|r| !(r.seconds > 0.0 && r.seconds.is_finite() && r.x > 0.0)) {
        return Err(format!("timing for n={} m={} is not positive and finite", r.n, r.m));
    }
    let loss = |la: f64, lb: f64| {
        TimeLaw {
            alpha: la.exp(),
            beta: lb.exp(),
            gamma,
        }
        .msle(records)
    };
    let (t_min, t_max) = records
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r.seconds), hi.max(r.seconds)));
    let (b_min, b_max) = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        let b = (r.seconds / r.x.powf(gamma)).ln();
        (lo.min(b), hi.max(b))
    });
    let mut a_range = (t_min.ln() - 12.0, t_max.ln());
    let mut b_range = (b_min - 12.0, b_max + 1.0);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let mut points = COARSE_POINTS;
    for _ in 0..REFINE_ROUNDS {
        for la in grid(a_range.0, a_range.1, points) {
            for lb in grid(b_range.0, b_range.1, points) {
                let l = loss(la, lb);
                if l < best.0 {
                    best = (l, la, lb);
                }
            }
        }
        let half_a = (a_range.1 - a_range.0) / (points - 1) as f64 * 2.0;
        let half_b = (b_range.1 - b_range.0) / (points - 1) as f64 * 2.0;
        a_range = (best.1 - half_a, best.1 + half_a);
        b_range = (best.2 - half_b, best.2 + half_b);
        points = FINE_POINTS;
    }
    Ok(TimeLaw {
        alpha: best.1.exp(),
        beta: best.2.exp(),
        gamma,
    })
}

/// Median of a non-empty sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        (v[k - 1] + v[k]) / 2.0
    }
}

/// Parses `"1000x10,2000x10"` into `(n, m)` pairs.
pub fn parse_sizes(spec: &str) -> Result<Vec<(usize, usize)>, String> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (n, m) = item
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| format!("size {item:?} is not of the form NxM"))?;
            let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("size {item:?} has a bad number"));
            let (n, m) = (parse(n)?, parse(m)?);
            if n < 2 || m < 1 {
                return Err(format!("size {item:?} needs n >= 2 and m >= 1"));
            }
            Ok((n, m))
        })
        .collect()
}
