//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamId, ParamStore, Tensor};

pub const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: CLIP_NORM,
        }
    }
}

/// Per-parameter gradient buffers keyed by parameter id.
pub type GradSet = Vec<(ParamId, Vec<f32>)>;

pub fn global_norm(grads: &GradSet) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut GradSet, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, moments: Vec::new() }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &GradSet, lr: f64) {
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        for (id, g) in grads {
            let i = id.index();
            if self.moments.len() <= i {
                self.moments.resize(i + 1, None);
            }
            let st = self.moments[i].get_or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            let p = store.get_mut(*id).data_mut();
            for k in 0..g.len() {
                let gk = g[k] as f64;
                st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * gk;
                st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * gk * gk;
                let update = lr * (st.m[k] / c1) / ((st.v[k] / c2).sqrt() + eps);
                p[k] = (p[k] as f64 - update) as f32;
            }
        }
    }
}

/// Adds `src` into `dst`, matching parameters by id.
pub fn accumulate(dst: &mut GradSet, src: GradSet) {
    for (id, g) in src {
        match dst.iter_mut().find(|(d, _)| *d == id) {
            Some((_, acc)) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => dst.push((id, g)),
        }
    }
}

pub fn grads_finite(grads: &GradSet) -> bool {
    grads.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
}

/// Gradient of one parameter as a tensor, for inspection.
pub fn grad_tensor(store: &ParamStore<f32>, grads: &GradSet, id: ParamId) -> Option<Tensor<f32>> {
    let (_, g) = grads.iter().find(|(d, _)| *d == id)?;
    Tensor::new(store.get(id).shape().to_vec(), g.clone()).ok()
}
