//! Two-class Gaussian blobs with a guaranteed margin, used as a separable
//! reference task.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub features: usize,
    /// Distance of each class center from the separating hyperplane, in
    /// units of the per-feature noise std.
    pub margin: f64,
}

/// Rows are train rows then test rows. Class centers sit at `shift ± margin·u`
/// for a random unit vector `u`; points add isotropic unit noise. Each part
/// holds both classes in equal proportion (up to one row).
pub fn gaussian_blobs(spec: BlobSpec, rng: &mut impl Rng) -> Result<(Tensor<f32>, Vec<usize>)> {
    let BlobSpec { n_train, n_test, features: m, margin } = spec;
    if m == 0 || n_train < 2 || n_test == 0 || !(margin > 0.0) {
        return Err(Error::Input(format!("blob spec {spec:?}")));
    }
    let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
    let mut u: Vec<f64> = (0..m).map(|_| normal()).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    u.iter_mut().for_each(|v| *v /= norm);
    let shift: Vec<f64> = (0..m).map(|_| 2.0 * normal()).collect();
    let mut labels: Vec<usize> = (0..n_train).map(|i| i % 2).chain((0..n_test).map(|i| i % 2)).collect();
    let (train, test) = labels.split_at_mut(n_train);
    use rand::seq::SliceRandom;
    train.shuffle(rng);
    test.shuffle(rng);
    let n = n_train + n_test;
    let mut data = Vec::with_capacity(n * m);
    for &y in &labels {
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for j in 0..m {
            let z: f64 = StandardNormal.sample(rng);
            data.push((shift[j] + sign * margin * u[j] + z) as f32);
        }
    }
    Ok((Tensor::new(vec![n, m], data)?, labels))
}
