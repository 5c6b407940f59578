//! Central finite-difference oracle for the reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const STEP: f64 = 1e-5;

/// `|g - ĝ| / max(1, |g|, |ĝ|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Reduces `v` to a scalar through a random weighting fixed by `seed`, so
/// gradients of normalized outputs do not cancel to zero.
pub fn random_probe(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let w = Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng));
    let w = g.input(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn eval_scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    g.check_finite()?;
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::shape("grad_check", format!("output {:?} is not scalar", t.shape())));
    }
    Ok(t.data()[0])
}

/// Max relative error between backprop and finite differences over every
/// element of `inputs`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for j in 0..input.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut perturbed = inputs.to_vec();
                perturbed[i].data_mut()[j] += delta;
                let mut g = Graph::inference();
                let vars: Vec<Var> = perturbed.into_iter().map(|t| g.input(t)).collect();
                let out = f(&mut g, &vars)?;
                eval_scalar(&g, out)
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Same check against every trainable parameter in `store`.
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let analytic = grads
            .params()
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for j in 0..store.get(id).numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[j] += delta;
                let mut g = Graph::inference();
                let out = f(&mut g, &s)?;
                eval_scalar(&g, out)
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}
