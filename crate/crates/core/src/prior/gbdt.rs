//! Gradient-boosted regression trees with squared loss.
//!
//! Trees grow level by level with exact greedy splits found by scanning
//! presorted feature orders, with second-order leaf weights
//! `-G / (H + λ)` as in standard boosting libraries.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GbdtParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub lambda: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            n_estimators: 4,
            max_depth: 4,
            learning_rate: 0.3,
            lambda: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gbdt {
    pub base: f64,
    pub trees: Vec<RegressionTree>,
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Gbdt {
    /// Fits on a row-major `n x p` design `x` against `y`.
    pub fn fit(x: &[f64], p: usize, y: &[f64], params: GbdtParams) -> Result<Self> {
        let n = y.len();
        if n == 0 || p == 0 || x.len() != n * p {
            return Err(Error::Input(format!("gbdt: {} values for {n} rows x {p} features", x.len())));
        }
        if params.max_depth == 0 || params.n_estimators == 0 {
            return Err(Error::Config("gbdt needs at least one tree of depth >= 1".into()));
        }
        let order: Vec<Vec<usize>> = (0..p)
            .map(|f| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| x[a * p + f].total_cmp(&x[b * p + f]));
                idx
            })
            .collect();
        let base = y.iter().sum::<f64>() / n as f64;
        let mut pred = vec![base; n];
        let mut trees = Vec::with_capacity(params.n_estimators);
        for _ in 0..params.n_estimators {
            let grad: Vec<f64> = pred.iter().zip(y).map(|(p, t)| p - t).collect();
            let tree = grow(x, p, &grad, &order, params);
            for (i, v) in pred.iter_mut().enumerate() {
                *v += tree.predict(&x[i * p..(i + 1) * p]);
            }
            trees.push(tree);
        }
        Ok(Gbdt { base, trees })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.base + self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }
}

/// One tree on squared-loss gradients (all hessians are 1).
fn grow(x: &[f64], p: usize, grad: &[f64], order: &[Vec<usize>], params: GbdtParams) -> RegressionTree {
    let n = grad.len();
    let lambda = params.lambda;
    let score = |g: f64, h: f64| g * g / (h + lambda);
    let mut nodes = vec![Node::Leaf(0.0)];
    // Sample -> node index; `usize::MAX` once the sample sits in a finished leaf.
    let mut node_of = vec![0usize; n];
    let mut frontier = vec![0usize];
    for _depth in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        // Slot of each frontier node, and per-slot gradient totals.
        let mut slot = vec![usize::MAX; nodes.len()];
        for (s, &id) in frontier.iter().enumerate() {
            slot[id] = s;
        }
        let k = frontier.len();
        let mut g_tot = vec![0.0; k];
        let mut h_tot = vec![0.0; k];
        for i in 0..n {
            if node_of[i] != usize::MAX {
                let s = slot[node_of[i]];
                g_tot[s] += grad[i];
                h_tot[s] += 1.0;
            }
        }
        let mut best: Vec<Option<Candidate>> = (0..k).map(|_| None).collect();
        let mut g_left = vec![0.0; k];
        let mut h_left = vec![0.0; k];
        let mut last = vec![f64::NAN; k];
        for (f, idx) in order.iter().enumerate() {
            g_left.iter_mut().for_each(|v| *v = 0.0);
            h_left.iter_mut().for_each(|v| *v = 0.0);
            last.iter_mut().for_each(|v| *v = f64::NAN);
            for &i in idx {
                if node_of[i] == usize::MAX {
                    continue;
                }
                let s = slot[node_of[i]];
                let v = x[i * p + f];
                if h_left[s] > 0.0 && v > last[s] {
                    let (gl, hl) = (g_left[s], h_left[s]);
                    let (gr, hr) = (g_tot[s] - gl, h_tot[s] - hl);
                    let gain = 0.5 * (score(gl, hl) + score(gr, hr) - score(g_tot[s], h_tot[s]));
                    if gain > 1e-12 && best[s].as_ref().is_none_or(|b| gain > b.gain) {
                        best[s] = Some(Candidate {
                            gain,
                            feature: f,
                            threshold: midpoint(last[s], v),
                        });
                    }
                }
                g_left[s] += grad[i];
                h_left[s] += 1.0;
                last[s] = v;
            }
        }
        let mut next = Vec::new();
        for (s, &id) in frontier.iter().enumerate() {
            match best[s].take() {
                Some(c) => {
                    let left = nodes.len();
                    nodes.push(Node::Leaf(0.0));
                    nodes.push(Node::Leaf(0.0));
                    nodes[id] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right: left + 1,
                    };
                    next.push(left);
                    next.push(left + 1);
                }
                None => {
                    nodes[id] = Node::Leaf(-params.learning_rate * g_tot[s] / (h_tot[s] + lambda));
                }
            }
        }
        for i in 0..n {
            let id = node_of[i];
            if id == usize::MAX {
                continue;
            }
            node_of[i] = match nodes[id] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if x[i * p + feature] < threshold {
                        left
                    } else {
                        right
                    }
                }
                Node::Leaf(_) => usize::MAX,
            };
        }
        frontier = next;
    }
    // Remaining frontier nodes become leaves at max depth.
    let mut g_tot = vec![0.0; nodes.len()];
    let mut h_tot = vec![0.0; nodes.len()];
    for i in 0..n {
        if node_of[i] != usize::MAX {
            g_tot[node_of[i]] += grad[i];
            h_tot[node_of[i]] += 1.0;
        }
    }
    for id in frontier {
        nodes[id] = Node::Leaf(-params.learning_rate * g_tot[id] / (h_tot[id] + lambda));
    }
    RegressionTree { nodes }
}

/// A threshold `t` with `lo < t <= hi`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo {
        mid
    } else {
        hi
    }
}
