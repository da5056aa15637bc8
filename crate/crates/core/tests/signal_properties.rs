mod common;

use std::f64::consts::PI;

use proptest::prelude::*;
use tfkl_core::signal::{analytic_signal, ReferenceComponent};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_real_part_is_the_input(half in 4usize..80, seed in any::<u64>()) {
        let x = common::random_real(2 * half, seed);
        let z = analytic_signal(&x).unwrap();
        for (a, b) in z.real().iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn analytic_energy_doubles_without_dc_or_nyquist(
        half in 4usize..64,
        amps in prop::collection::vec((-1.0f64..1.0, 0.0f64..(2.0 * PI)), 1..6),
        bins in prop::collection::vec(any::<prop::sample::Index>(), 6),
    ) {
        let n = 2 * half;
        let mut x = vec![0.0; n];
        for ((a, phase), bin) in amps.iter().zip(&bins) {
            let k = 1 + bin.index(half - 1);
            for (t, v) in x.iter_mut().enumerate() {
                *v += a * (2.0 * PI * k as f64 * t as f64 / n as f64 + phase).cos();
            }
        }
        let ex: f64 = x.iter().map(|v| v * v).sum();
        prop_assume!(ex > 1e-6);
        let ez = analytic_signal(&x).unwrap().energy();
        prop_assert!((ez - 2.0 * ex).abs() <= 1e-6 * 2.0 * ex, "{} vs {}", ez, 2.0 * ex);
    }
}

#[test]
fn chirp_if_laws_have_the_reference_directions() {
    let falling = ReferenceComponent::FallingChirp.spec();
    let rising = ReferenceComponent::RisingChirp.spec();
    for t in 0..255 {
        let (t0, t1) = (t as f64, t as f64 + 1.0);
        assert!(falling.if_law(t1) < falling.if_law(t0));
        assert!(rising.if_law(t1) > rising.if_law(t0));
    }
    assert!((falling.if_law(0.0) - 0.29).abs() < 1e-12);
    assert!((rising.if_law(128.0) - 0.2626).abs() < 1e-12);
    let sfm = ReferenceComponent::Sinusoidal.spec();
    assert!((sfm.if_law(128.0) - (0.21 + 0.12363 * 1.83f64.cos())).abs() < 1e-4);
}

#[test]
fn bin_aligned_cosine_has_sine_quadrature() {
    let n = 64;
    let x: Vec<f64> = (0..n).map(|t| (2.0 * PI * 0.125 * t as f64).cos()).collect();
    let z = analytic_signal(&x).unwrap();
    for (t, v) in z.samples.iter().enumerate() {
        assert!((v.norm() - 1.0).abs() < 1e-9);
        assert!((v.im - (2.0 * PI * 0.125 * t as f64).sin()).abs() < 1e-9);
    }
}
