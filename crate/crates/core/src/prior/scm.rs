//! Layered structural causal models.
//!
//! Both generators share the same skeleton: Gaussian input noise feeds a
//! chain of fully connected layers, and every non-input node is a candidate
//! feature. The MLP variant computes each layer as a random linear map, an
//! activation layer and additive Gaussian noise. The tree variant replaces
//! the linear map and activation by boosted trees fitted to random Gaussian
//! targets.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::activation::{activation_layer, ActivationKind, RandomFourier, Rescale};
use super::gbdt::{Gbdt, GbdtParams};
use crate::error::{Error, Result};

pub const MIN_LAYERS: usize = 2;
pub const MAX_LAYERS: usize = 5;
pub const MIN_WIDTH: usize = 4;
pub const MAX_WIDTH: usize = 16;
pub const MIN_INPUT_DIM: usize = 2;
pub const MAX_INPUT_DIM: usize = 8;
pub const MIN_NOISE_STD: f64 = 0.01;
pub const MAX_NOISE_STD: f64 = 0.3;
/// Upper bound on sampled tree count and depth.
pub const TREE_PARAM_CAP: usize = 4;

/// Layer widths for a graph that must expose at least `min_nodes` non-input
/// nodes. Widths are drawn from `MIN_WIDTH..=MAX_WIDTH` and raised uniformly
/// when the requested feature count needs more nodes.
pub fn sample_skeleton(rng: &mut impl Rng, min_nodes: usize) -> (usize, Vec<usize>) {
    let input_dim = rng.random_range(MIN_INPUT_DIM..=MAX_INPUT_DIM);
    let layers = rng.random_range(MIN_LAYERS..=MAX_LAYERS);
    let floor = min_nodes.div_ceil(layers).max(MIN_WIDTH);
    let widths = (0..layers)
        .map(|_| rng.random_range(MIN_WIDTH..=MAX_WIDTH).max(floor))
        .collect();
    (input_dim, widths)
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Node values of one realized graph: one row-major `n x width` block per
/// non-input layer.
#[derive(Clone, Debug)]
pub struct Realization {
    pub n: usize,
    pub layers: Vec<(usize, Vec<f64>)>,
}

impl Realization {
    pub fn node_count(&self) -> usize {
        self.layers.iter().map(|(w, _)| w).sum()
    }

    /// Values of node `(layer, j)` for all samples.
    pub fn node(&self, layer: usize, j: usize) -> Vec<f64> {
        let (w, v) = &self.layers[layer];
        (0..self.n).map(|i| v[i * w + j]).collect()
    }

    /// Chooses a target node from the last two layers and `m` distinct
    /// feature nodes among the remaining non-input nodes.
    pub fn select(&self, m: usize, rng: &mut impl Rng) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut nodes = Vec::new();
        for (l, (w, _)) in self.layers.iter().enumerate() {
            for j in 0..*w {
                nodes.push((l, j));
            }
        }
        if nodes.len() < m + 1 {
            return Err(Error::Config(format!("{} nodes cannot supply {m} features and a target", nodes.len())));
        }
        let first_late = self.layers.len().saturating_sub(2);
        let late: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].0 >= first_late).collect();
        let target_at = late[rng.random_range(0..late.len())];
        let (tl, tj) = nodes.remove(target_at);
        let picks = index::sample(rng, nodes.len(), m);
        let features = picks.iter().map(|i| self.node(nodes[i].0, nodes[i].1)).collect();
        Ok((features, self.node(tl, tj)))
    }
}

#[derive(Clone, Debug)]
pub struct ScmLayer {
    pub width: usize,
    /// Row-major `width x fan_in`.
    pub weight: Vec<f64>,
    pub activation: ActivationKind,
    pub rescale: Rescale,
    pub fourier: Option<RandomFourier>,
    /// Per-node additive noise standard deviation.
    pub noise_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ScmGraph {
    pub input_dim: usize,
    pub layers: Vec<ScmLayer>,
}

impl ScmGraph {
    pub fn sample(rng: &mut impl Rng, min_nodes: usize) -> Self {
        let (input_dim, widths) = sample_skeleton(rng, min_nodes);
        let shared = rng.random_bool(0.5).then(|| ActivationKind::sample(rng));
        let (lo, hi) = (MIN_NOISE_STD.ln(), MAX_NOISE_STD.ln());
        let mut fan_in = input_dim;
        let mut layers = Vec::with_capacity(widths.len());
        for width in widths {
            let activation = shared.unwrap_or_else(|| ActivationKind::sample(rng));
            let fourier = (activation == ActivationKind::RandomFourier).then(|| RandomFourier::sample(rng));
            layers.push(ScmLayer {
                width,
                weight: gaussian_matrix(rng, width, fan_in, 1.0 / (fan_in as f64).sqrt()),
                activation,
                rescale: Rescale::sample(rng),
                fourier,
                noise_std: (0..width).map(|_| rng.random_range(lo..=hi).exp()).collect(),
            });
            fan_in = width;
        }
        ScmGraph { input_dim, layers }
    }

    /// Pushes `n` input-noise samples through the graph.
    pub fn propagate(&self, n: usize, rng: &mut impl Rng) -> Result<Realization> {
        let mut prev = gaussian_matrix(rng, n, self.input_dim, 1.0);
        let mut fan_in = self.input_dim;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = layer.width;
            let mut h = vec![0.0; n * w];
            for i in 0..n {
                let x = &prev[i * fan_in..(i + 1) * fan_in];
                for j in 0..w {
                    let row = &layer.weight[j * fan_in..(j + 1) * fan_in];
                    h[i * w + j] = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            activation_layer(&mut h, w, layer.activation, layer.rescale, layer.fourier.as_ref())?;
            for (j, &std) in layer.noise_std.iter().enumerate() {
                if std > 0.0 {
                    let noise = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    for i in 0..n {
                        h[i * w + j] += noise.sample(rng);
                    }
                }
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "scm_layer" });
            }
            out.push((w, h.clone()));
            prev = h;
            fan_in = w;
        }
        Ok(Realization { n, layers: out })
    }
}

/// `min{cap, offset + Exponential(0.5)}`, floored, clamped below at `floor`.
pub fn sample_tree_param(rng: &mut impl Rng, offset: f64, floor: usize) -> usize {
    let e: f64 = Exp::new(0.5).expect("positive rate").sample(rng);
    ((offset + e).min(TREE_PARAM_CAP as f64).floor() as usize).max(floor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeLayerSpec {
    pub width: usize,
    pub n_estimators: usize,
    pub max_depth: usize,
}

impl TreeLayerSpec {
    /// `2^max_depth * n_estimators + 1`: the number of intervals the trees'
    /// thresholds can cut a single input axis into. Sums of trees over
    /// several inputs can exceed it.
    pub fn distinct_value_bound(&self) -> usize {
        (1usize << self.max_depth) * self.n_estimators + 1
    }
}

#[derive(Clone, Debug)]
pub struct TreeScmGraph {
    pub input_dim: usize,
    pub layers: Vec<TreeLayerSpec>,
}

impl TreeScmGraph {
    pub fn sample(rng: &mut impl Rng, min_nodes: usize) -> Self {
        let (input_dim, widths) = sample_skeleton(rng, min_nodes);
        let layers = widths
            .into_iter()
            .map(|width| TreeLayerSpec {
                width,
                n_estimators: sample_tree_param(rng, 1.0, 1),
                max_depth: sample_tree_param(rng, 2.0, 2),
            })
            .collect();
        TreeScmGraph { input_dim, layers }
    }

    /// Each layer fits one boosted ensemble per output node on the layer
    /// inputs against standard-normal targets and emits its predictions.
    pub fn propagate(&self, n: usize, rng: &mut impl Rng) -> Result<Realization> {
        let mut prev = gaussian_matrix(rng, n, self.input_dim, 1.0);
        let mut fan_in = self.input_dim;
        let mut out = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let params = GbdtParams {
                n_estimators: spec.n_estimators,
                max_depth: spec.max_depth,
                ..GbdtParams::default()
            };
            let w = spec.width;
            let mut h = vec![0.0; n * w];
            for j in 0..w {
                let targets = gaussian_matrix(rng, n, 1, 1.0);
                let model = Gbdt::fit(&prev, fan_in, &targets, params)?;
                for i in 0..n {
                    h[i * w + j] = model.predict(&prev[i * fan_in..(i + 1) * fan_in]);
                }
            }
            out.push((w, h.clone()));
            prev = h;
            fan_in = w;
        }
        Ok(Realization { n, layers: out })
    }
}
