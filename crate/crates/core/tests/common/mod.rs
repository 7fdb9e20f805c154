#![allow(dead_code)]

use bpd::nn::seeded_rng;
use bpd::Tensor;
use rand_distr::{Distribution, StandardNormal};

/// `n` draws of a standard bivariate Gaussian with correlation `rho`,
/// as two `(n, 1)` tensors.
pub fn correlated_gaussians(n: usize, rho: f64, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = seeded_rng(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let e: f64 = StandardNormal.sample(&mut rng);
        x.push(a);
        y.push(rho * a + (1.0 - rho * rho).sqrt() * e);
    }
    (
        Tensor::from_f64(&[n, 1], &x).unwrap(),
        Tensor::from_f64(&[n, 1], &y).unwrap(),
    )
}

/// Mutual information of a standard bivariate Gaussian.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}
