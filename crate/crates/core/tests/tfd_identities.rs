mod common;

use common::{argmax, band_energy, random_analytic, tone, two_tone};
use num_complex::Complex64;
use tfkl_core::metrics::l1_distance;
use tfkl_core::signal::ReferenceComponent;
use tfkl_core::tfd::{
    ambiguity, cohen_tfd, doppler_lag_from_lags, instantaneous_autocorrelation, lags_from_wvd_complex,
    wvd, wvd_complex_from_lags,
};
use tfkl_core::{KernelSpec, MixtureSpec, Signal, Snr};

#[test]
fn lag_wvd_ambiguity_round_trips() {
    for (n, seed) in [(64, 1), (128, 2), (256, 3)] {
        let z = random_analytic(n, seed);
        let k = instantaneous_autocorrelation(&z).unwrap();
        let w = wvd_complex_from_lags(&k);
        assert!(k.max_rel_diff(&lags_from_wvd_complex(&w)) < 1e-9);

        // the ambiguity function is the time DFT of the same lag array
        let af = ambiguity(&z).unwrap();
        let direct = doppler_lag_from_lags(&k);
        for (i, row) in direct.data.chunks(n).enumerate() {
            let doppler = if i < n / 2 { i as isize } else { i as isize - n as isize };
            for (j, v) in row.iter().enumerate() {
                let lag = if j < n / 2 { j as isize } else { j as isize - n as isize };
                assert!((af.at(doppler, lag) - v).norm() <= 1e-9 * af.origin().norm());
            }
        }
    }
}

#[test]
fn time_marginal_is_instantaneous_power() {
    for seed in 0..5 {
        let z = random_analytic(128, seed);
        let w = wvd(&z).unwrap();
        for t in 0..128 {
            let expected = 128.0 * z.samples[t].norm_sqr();
            let got: f64 = w.row(t).iter().sum();
            assert!((got - expected).abs() <= 1e-9 * expected.max(1e-12), "row {t}: {got} vs {expected}");
        }
    }
}

#[test]
fn wvd_of_analytic_input_is_real() {
    let z = random_analytic(256, 9);
    let w = wvd_complex_from_lags(&instantaneous_autocorrelation(&z).unwrap());
    let peak = w.data.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let imag = w.data.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    assert!(imag < 1e-9 * peak, "{imag} vs {peak}");
}

#[test]
fn time_shift_moves_rows() {
    // compact support keeps every lag inside the boundary-forced limit
    let n = 64;
    let base = tone(n, 20.0);
    let support = 20..36;
    let windowed: Vec<Complex64> = (0..n)
        .map(|t| if support.contains(&t) { base.samples[t] * (1.0 + 0.1 * t as f64) } else { Complex64::new(0.0, 0.0) })
        .collect();
    let w = wvd(&Signal::new(windowed.clone())).unwrap();
    for s in [1usize, 5, 12] {
        let mut shifted = windowed.clone();
        shifted.rotate_right(s);
        let ws = wvd(&Signal::new(shifted)).unwrap();
        for t in 1..n - 1 - s {
            for k in 0..n {
                assert!((ws.get(t + s, k) - w.get(t, k)).abs() < 1e-9, "shift {s} row {t} bin {k}");
            }
        }
    }
}

#[test]
fn two_tone_interference_sits_at_midpoint() {
    let w = wvd(&two_tone()).unwrap();
    let signs: Vec<bool> = (16..48).map(|t| w.get(t, 24) > 0.0).collect();
    assert!(signs.windows(2).any(|p| p[0] != p[1]), "cross-term does not oscillate");
    for t in 16..48 {
        let row = w.row(t);
        for k in [12, 36] {
            assert!(row[k] > row[k - 1] && row[k] > row[k + 1], "row {t} bin {k}");
        }
    }
    assert!(band_energy(&w, 16..48, 24, 24) > 10.0 * band_energy(&w, 16..48, 18, 18));
}

#[test]
fn cwd_cross_term_energy_falls_with_sigma() {
    let z = two_tone();
    let energies: Vec<f64> = [1.0, 0.2, 0.05]
        .iter()
        .map(|&sigma| band_energy(&cohen_tfd(&z, &KernelSpec::Cwd { sigma }).unwrap(), 8..56, 22, 26))
        .collect();
    assert!(energies.windows(2).all(|p| p[1] <= p[0]), "{energies:?}");
}

#[test]
fn smoothing_kernels_suppress_two_tone_cross_term() {
    let z = two_tone();
    let w = wvd(&z).unwrap();
    let raw = band_energy(&w, 8..56, 22, 26);
    for spec in [KernelSpec::cwd(), KernelSpec::ckd()] {
        let s = cohen_tfd(&z, &spec).unwrap();
        let e = band_energy(&s, 8..56, 22, 26);
        assert!(raw >= 10.0 * e, "{}: {raw} vs {e}", spec.name());
        for t in 8..56 {
            assert_eq!(argmax(&s.row(t)[..24]), 12, "{} row {t}", spec.name());
            assert_eq!(25 + argmax(&s.row(t)[25..]), 36, "{} row {t}", spec.name());
        }
    }
}

#[test]
fn ckd_beats_wvd_on_noisy_reference_mixture() {
    let mix = MixtureSpec {
        components: vec![ReferenceComponent::FallingChirp.spec(), ReferenceComponent::Sinusoidal.spec()],
        n: 256,
        snr: Snr::Db(15.0),
        seed: 11,
    };
    let z = mix.synthesize().unwrap();
    let model = mix.ideal_tfd().unwrap();
    let d_wvd = l1_distance(&wvd(&z).unwrap(), &model).unwrap();
    let d_ckd = l1_distance(&cohen_tfd(&z, &KernelSpec::ckd()).unwrap(), &model).unwrap();
    assert!(d_ckd < d_wvd, "ckd {d_ckd} vs wvd {d_wvd}");
}

#[test]
fn allpass_is_bitwise_wvd() {
    let z = random_analytic(64, 4);
    assert_eq!(cohen_tfd(&z, &KernelSpec::AllPass).unwrap(), wvd(&z).unwrap());
}
