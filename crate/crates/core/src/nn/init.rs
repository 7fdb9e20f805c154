use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the Xavier (Glorot) normal scheme.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> Result<f64, TensorError> {
    if fan_in == 0 || fan_out == 0 {
        return Err(TensorError::InvalidArgument(format!(
            "xavier init needs positive fans, got fan_in={fan_in}, fan_out={fan_out}"
        )));
    }
    Ok((2.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Draws a tensor from `N(0, 2 / (fan_in + fan_out))`.
pub fn xavier_normal<S: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>, TensorError> {
    let std = xavier_std(fan_in, fan_out)?;
    let normal = Normal::new(0.0, std).expect("finite std");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| S::from_f64(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Mixes a base seed with a sequence of tags (splitmix64 finaliser).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = base;
    for &t in tags {
        s = splitmix(s ^ splitmix(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    splitmix(s)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_formula() {
        assert!((xavier_std(100, 100).unwrap() - 0.1).abs() < 1e-15);
        assert!(xavier_std(0, 3).is_err());
        assert!(xavier_std(3, 0).is_err());
    }

    #[test]
    fn sample_std_matches_formula() {
        let mut rng = seeded_rng(7);
        let t: Tensor<f64> = xavier_normal(&[100, 100], 100, 100, &mut rng).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.1).abs() < 0.005, "sample std {}", var.sqrt());
    }

    #[test]
    fn deterministic_given_seed() {
        let a: Tensor<f32> = xavier_normal(&[8, 5], 8, 5, &mut seeded_rng(3)).unwrap();
        let b: Tensor<f32> = xavier_normal(&[8, 5], 8, 5, &mut seeded_rng(3)).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_eq!(derive_seed(9, &[4]), derive_seed(9, &[4]));
    }
}
