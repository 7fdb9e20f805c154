mod common;

use bpd::mine::MineEstimator;
use common::{correlated_gaussians, gaussian_mi};

#[test]
fn correlated_gaussians_recover_analytic_information() {
    let (x, y) = correlated_gaussians(10_000, 0.8, 11);
    let est = MineEstimator::default().estimate(&x, &y).unwrap();
    let truth = gaussian_mi(0.8);
    assert!((truth - 0.5108).abs() < 1e-4);
    assert!((est - truth).abs() <= 0.10, "estimate {est}, analytic {truth}");
}

#[test]
fn independent_gaussians_estimate_near_zero() {
    let (x, y) = correlated_gaussians(10_000, 0.0, 12);
    let est = MineEstimator::default().estimate(&x, &y).unwrap();
    assert!(est.abs() <= 0.05, "estimate {est}");
}

#[test]
fn mismatched_rows_are_rejected() {
    let (x, _) = correlated_gaussians(10, 0.5, 1);
    let (y, _) = correlated_gaussians(9, 0.5, 1);
    assert!(MineEstimator::default().estimate(&x, &y).is_err());
}
