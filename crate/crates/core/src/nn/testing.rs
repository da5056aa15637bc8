//! Finite-difference helpers shared by the layer tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{FeatureMap, Tensor};

pub fn random_values(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_map(batch: usize, channels: usize, height: usize, width: usize, seed: u64) -> FeatureMap {
    let len = batch * channels * height * width;
    FeatureMap::from_vec(batch, channels, height, width, random_values(len, seed)).unwrap()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, random_values(len, seed)).unwrap()
}

/// Compares `analytic[i]` with the central difference of `loss(i, ±h)`.
pub fn check_grad(
    name: &str,
    values: &[f64],
    analytic: &[f64],
    tol: f64,
    loss: impl Fn(usize, f64) -> f64,
) {
    assert_eq!(values.len(), analytic.len(), "{name}: gradient length");
    let h = 1e-5;
    for i in 0..values.len() {
        let numeric = (loss(i, h) - loss(i, -h)) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-3);
        let err = (analytic[i] - numeric).abs() / scale;
        assert!(
            err < tol,
            "{name}[{i}]: analytic {} vs numeric {numeric} (rel {err:.2e})",
            analytic[i]
        );
    }
}
