#![allow(dead_code)]

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfkl_core::signal::analytic_signal;
use tfkl_core::{Signal, TfMatrix};

/// Complex exponential at `bin/(2n)` cycles/sample.
pub fn tone(n: usize, bin: f64) -> Signal {
    let f = bin / (2.0 * n as f64);
    Signal::new((0..n).map(|t| Complex64::from_polar(1.0, 2.0 * PI * f * t as f64)).collect())
}

/// Tones at bins 12 and 36 of a 64-point grid.
pub fn two_tone() -> Signal {
    let a = tone(64, 12.0);
    let b = tone(64, 36.0);
    Signal::new(a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect())
}

pub fn random_real(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_analytic(n: usize, seed: u64) -> Signal {
    analytic_signal(&random_real(n, seed)).unwrap()
}

/// Sum of squares over bins `lo..=hi` of rows `rows`.
pub fn band_energy(m: &TfMatrix, rows: std::ops::Range<usize>, lo: usize, hi: usize) -> f64 {
    rows.map(|r| m.row(r)[lo..=hi].iter().map(|v| v * v).sum::<f64>()).sum()
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn random_map(batch: usize, channels: usize, size: usize, seed: u64) -> tfkl_core::nn::FeatureMap {
    let v = random_real(batch * channels * size * size, seed);
    tfkl_core::nn::FeatureMap::from_vec(batch, channels, size, size, v).unwrap()
}
