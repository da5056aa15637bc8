//! Test-signal synthesis: AM-LFM and AM-SFM components, analytic signals,
//! calibrated white noise and ideal ("model") time-frequency distributions.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tfd::TfMatrix;

/// Smallest supported mixture length.
pub const MIN_SAMPLES: usize = 8;

/// Frequency-modulation law of one component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Modulation {
    /// Phase `2π(chirp_rate·(t² − t0²) + start_freq·(t − t0))`, so the
    /// instantaneous frequency is `2·chirp_rate·t + start_freq`.
    Lfm {
        chirp_rate: f64,
        start_freq: f64,
        t0: f64,
    },
    /// Phase `2π·carrier·(t − t0) + depth·sin(rate·(t − t0) − phase) − depth·sin(phase)`.
    Sfm {
        carrier: f64,
        depth: f64,
        rate: f64,
        phase: f64,
        t0: f64,
    },
}

/// Gaussian amplitude envelope `exp(−((t − center)/width)²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub center: f64,
    pub width: f64,
}

impl Envelope {
    /// The envelope `exp(−(0.0078·t − 1)²)` shared by the reference components.
    pub fn reference() -> Self {
        let s = 1.0 / 0.0078;
        Envelope {
            center: s,
            width: s,
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        let u = (t - self.center) / self.width;
        (-u * u).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub modulation: Modulation,
    pub envelope: Envelope,
}

/// The three reference components used for the synthetic benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceComponent {
    /// Descending AM-LFM, IF `0.29 − 0.0006·t`.
    FallingChirp,
    /// Ascending AM-LFM, IF `0.109 + 0.0012·t`.
    RisingChirp,
    /// AM-SFM around 0.21 cycles/sample.
    Sinusoidal,
}

impl ReferenceComponent {
    pub const T0: f64 = 128.0;

    pub fn spec(self) -> ComponentSpec {
        let t0 = Self::T0;
        let modulation = match self {
            ReferenceComponent::FallingChirp => Modulation::Lfm {
                chirp_rate: -0.0003,
                start_freq: 0.29,
                t0,
            },
            ReferenceComponent::RisingChirp => Modulation::Lfm {
                chirp_rate: 0.0006,
                start_freq: 0.109,
                t0,
            },
            ReferenceComponent::Sinusoidal => Modulation::Sfm {
                carrier: 0.21,
                depth: 31.7,
                rate: 0.0078 * PI,
                phase: -1.83,
                t0,
            },
        };
        ComponentSpec {
            modulation,
            envelope: Envelope::reference(),
        }
    }
}

impl ComponentSpec {
    /// Checks the envelope and that the IF law stays inside (0, 0.5) for
    /// every integer `t` in `[0, n)`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let params: &[f64] = match &self.modulation {
            Modulation::Lfm {
                chirp_rate,
                start_freq,
                t0,
            } => &[*chirp_rate, *start_freq, *t0],
            Modulation::Sfm {
                carrier,
                depth,
                rate,
                phase,
                t0,
            } => &[*carrier, *depth, *rate, *phase, *t0],
        };
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("component", "non-finite modulation parameter"));
        }
        if !(self.envelope.width > 0.0) || !self.envelope.center.is_finite() {
            return Err(Error::invalid(
                "component",
                format!("envelope width must be positive, got {}", self.envelope.width),
            ));
        }
        for t in 0..n {
            let freq = self.if_law(t as f64);
            if !(freq > 0.0 && freq < 0.5) {
                return Err(Error::FrequencyOutOfBand { index: t, freq });
            }
        }
        Ok(())
    }

    /// Instantaneous frequency in cycles/sample.
    pub fn if_law(&self, t: f64) -> f64 {
        match self.modulation {
            Modulation::Lfm {
                chirp_rate,
                start_freq,
                ..
            } => 2.0 * chirp_rate * t + start_freq,
            Modulation::Sfm {
                carrier,
                depth,
                rate,
                phase,
                t0,
            } => carrier + depth * rate / (2.0 * PI) * (rate * (t - t0) - phase).cos(),
        }
    }

    /// Phase in radians.
    pub fn phase(&self, t: f64) -> f64 {
        match self.modulation {
            Modulation::Lfm {
                chirp_rate,
                start_freq,
                t0,
            } => 2.0 * PI * (chirp_rate * (t * t - t0 * t0) + start_freq * (t - t0)),
            Modulation::Sfm {
                carrier,
                depth,
                rate,
                phase,
                t0,
            } => {
                2.0 * PI * carrier * (t - t0) + depth * (rate * (t - t0) - phase).sin()
                    - depth * phase.sin()
            }
        }
    }

    /// Real samples `a(t)·cos(phase(t))` for `t = 0..n`.
    pub fn synthesize(&self, n: usize) -> Result<Vec<f64>> {
        self.validate(n)?;
        Ok((0..n)
            .map(|t| {
                let t = t as f64;
                self.envelope.at(t) * self.phase(t).cos()
            })
            .collect())
    }
}

/// Requested signal-to-noise ratio. Serialized as a number of dB or the
/// string `"clean"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Clean,
    Db(f64),
}

impl Snr {
    pub fn from_db(db: f64) -> Self {
        if db == f64::INFINITY {
            Snr::Clean
        } else {
            Snr::Db(db)
        }
    }

    pub fn db(self) -> f64 {
        match self {
            Snr::Clean => f64::INFINITY,
            Snr::Db(db) => db,
        }
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Clean => f.write_str("clean"),
            Snr::Db(db) => write!(f, "{db}"),
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Snr::Clean => s.serialize_str("clean"),
            Snr::Db(db) => s.serialize_f64(*db),
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Db(f64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Db(db) => Ok(Snr::from_db(db)),
            Repr::Word(w) if w.eq_ignore_ascii_case("clean") => Ok(Snr::Clean),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a dB value or \"clean\", got {w:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<ComponentSpec>,
    pub n: usize,
    pub snr: Snr,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_SAMPLES {
            return Err(Error::invalid(
                "mixture",
                format!("N = {} is below the minimum of {MIN_SAMPLES}", self.n),
            ));
        }
        if self.components.is_empty() {
            return Err(Error::invalid("mixture", "at least one component is required"));
        }
        if let Snr::Db(db) = self.snr {
            if db.is_nan() {
                return Err(Error::invalid("mixture", "SNR is NaN"));
            }
        }
        for c in &self.components {
            c.validate(self.n)?;
        }
        Ok(())
    }

    /// Noise-free real sum of the components.
    pub fn clean_real(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let mut x = vec![0.0; self.n];
        for c in &self.components {
            for (acc, v) in x.iter_mut().zip(c.synthesize(self.n)?) {
                *acc += v;
            }
        }
        Ok(x)
    }

    /// Noisy analytic signal: real noise at the requested SNR is added to the
    /// real mixture before the analytic transform.
    pub fn synthesize(&self) -> Result<Signal> {
        let x = self.clean_real()?;
        let noisy = add_noise_real(&x, self.snr, self.seed)?;
        analytic_signal(&noisy)
    }

    /// Ideal TFD: each component deposits `a(n)²` on the bin nearest its IF.
    pub fn ideal_tfd(&self) -> Result<TfMatrix> {
        self.validate()?;
        let n = self.n;
        let mut m = TfMatrix::zeros(n, n);
        for c in &self.components {
            for t in 0..n {
                let tf = t as f64;
                let bin = (2.0 * n as f64 * c.if_law(tf)).round();
                let k = bin.clamp(0.0, (n - 1) as f64) as usize;
                let a = c.envelope.at(tf);
                *m.get_mut(t, k) += a * a;
            }
        }
        Ok(m)
    }
}

/// Complex analytic signal with unit sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<Complex64>,
}

impl Signal {
    pub fn new(samples: Vec<Complex64>) -> Self {
        Signal { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn real(&self) -> Vec<f64> {
        self.samples.iter().map(|z| z.re).collect()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// One-sided spectrum construction: keep DC and Nyquist, double the positive
/// bins, zero the negative ones.
pub fn analytic_signal(x: &[f64]) -> Result<Signal> {
    let n = x.len();
    if n == 0 || n % 2 != 0 {
        return Err(Error::UnsupportedLength(n));
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    for (k, v) in buf.iter_mut().enumerate() {
        if k == 0 || k == half {
            continue;
        }
        if k < half {
            *v *= 2.0;
        } else {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    for v in &mut buf {
        *v *= scale;
    }
    Ok(Signal::new(buf))
}

/// Adds zero-mean white Gaussian noise scaled so that the drawn noise power is
/// exactly `P_signal / 10^(snr/10)`.
pub fn add_noise_real(x: &[f64], snr: Snr, seed: u64) -> Result<Vec<f64>> {
    let db = match snr {
        Snr::Clean => return Ok(x.to_vec()),
        Snr::Db(db) => db,
    };
    if !db.is_finite() {
        return Err(Error::invalid("snr", format!("{db} dB")));
    }
    let n = x.len() as f64;
    let p_signal = x.iter().map(|v| v * v).sum::<f64>() / n;
    if !(p_signal > 0.0) || !p_signal.is_finite() {
        return Err(Error::UndefinedSnr);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let p_drawn = noise.iter().map(|v| v * v).sum::<f64>() / n;
    let p_target = p_signal / 10f64.powf(db / 10.0);
    let gain = (p_target / p_drawn).sqrt();
    Ok(x.iter().zip(&noise).map(|(s, e)| s + gain * e).collect())
}

/// Re-noises an analytic signal: noise goes onto its real part, which is then
/// made analytic again.
pub fn add_noise(z: &Signal, snr: Snr, seed: u64) -> Result<Signal> {
    if snr == Snr::Clean {
        return Ok(z.clone());
    }
    let noisy = add_noise_real(&z.real(), snr, seed)?;
    analytic_signal(&noisy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lfm(chirp_rate: f64, start_freq: f64) -> ComponentSpec {
        ComponentSpec {
            modulation: Modulation::Lfm {
                chirp_rate,
                start_freq,
                t0: 0.0,
            },
            envelope: Envelope {
                center: 0.0,
                width: 1e12,
            },
        }
    }

    #[test]
    fn falling_chirp_sample_at_reference_time() {
        let x = ReferenceComponent::FallingChirp.spec().synthesize(256).unwrap();
        let a = (-(0.0078f64 * 128.0 - 1.0).powi(2)).exp();
        assert!((x[128] - a).abs() < 1e-12);
        assert!((x[128] - 0.99999).abs() < 1e-4);
    }

    #[test]
    fn reference_envelope_peaks_near_128() {
        let env = Envelope::reference();
        let best = (0..256)
            .max_by(|&a, &b| env.at(a as f64).total_cmp(&env.at(b as f64)))
            .unwrap();
        assert!((best as i64 - 128).abs() <= 1);
    }

    #[test]
    fn degenerate_lfm_is_a_pure_cosine() {
        let x = lfm(0.0, 0.125).synthesize(64).unwrap();
        for (t, v) in x.iter().enumerate() {
            let expected = (2.0 * PI * 0.125 * t as f64).cos();
            assert!((v - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn reference_if_laws() {
        let x1 = ReferenceComponent::FallingChirp.spec();
        let x2 = ReferenceComponent::RisingChirp.spec();
        let x3 = ReferenceComponent::Sinusoidal.spec();
        assert!((x1.if_law(0.0) - 0.29).abs() < 1e-12);
        assert!((x2.if_law(128.0) - 0.2626).abs() < 1e-12);
        let expected = 0.21 + 31.7 * 0.0078 / 2.0 * 1.83f64.cos();
        assert!((x3.if_law(128.0) - expected).abs() < 1e-12);
        assert!((x3.if_law(128.0) - 0.1784).abs() < 2e-4);
        for t in 0..255 {
            let (a, b) = (t as f64, t as f64 + 1.0);
            assert!(x1.if_law(b) < x1.if_law(a));
            assert!(x2.if_law(b) > x2.if_law(a));
        }
        for c in [x1, x2, x3] {
            c.validate(256).unwrap();
        }
    }

    #[test]
    fn out_of_band_law_names_the_index() {
        // IF = 0.4 + 0.01 t crosses 0.5 between t = 9 and t = 10.
        let c = lfm(0.005, 0.4);
        match c.validate(64) {
            Err(Error::FrequencyOutOfBand { index, .. }) => assert_eq!(index, 10),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = lfm(0.0, 0.1);
        bad.envelope.width = 0.0;
        assert!(bad.validate(64).is_err());
    }

    #[test]
    fn analytic_of_bin_aligned_cosine() {
        let n = 64;
        let f0 = 0.125;
        let x: Vec<f64> = (0..n).map(|t| (2.0 * PI * f0 * t as f64).cos()).collect();
        let z = analytic_signal(&x).unwrap();
        for (t, v) in z.samples.iter().enumerate() {
            assert!((v.norm() - 1.0).abs() < 1e-9);
            assert!((v.re - x[t]).abs() < 1e-9);
            assert!((v.im - (2.0 * PI * f0 * t as f64).sin()).abs() < 1e-9);
        }
        let zeros = analytic_signal(&vec![0.0; 16]).unwrap();
        assert!(zeros.samples.iter().all(|v| *v == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn analytic_rejects_odd_length() {
        assert!(matches!(
            analytic_signal(&[1.0, 2.0, 3.0]),
            Err(Error::UnsupportedLength(3))
        ));
    }

    #[test]
    fn noise_power_is_calibrated() {
        let x = ReferenceComponent::FallingChirp.spec().synthesize(256).unwrap();
        let p_signal = x.iter().map(|v| v * v).sum::<f64>();
        let mut mean_db = 0.0;
        let seeds = 1000;
        for seed in 0..seeds {
            let y = add_noise_real(&x, Snr::Db(0.0), seed).unwrap();
            let p_noise: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
            let ratio = p_noise / p_signal;
            assert!((0.9..=1.1).contains(&ratio), "seed {seed}: {ratio}");
            mean_db += 10.0 * (p_signal / p_noise).log10();
        }
        mean_db /= seeds as f64;
        assert!(mean_db.abs() < 0.1);
    }

    #[test]
    fn noise_is_deterministic_and_clean_is_identity() {
        let x = ReferenceComponent::RisingChirp.spec().synthesize(64).unwrap();
        let z = analytic_signal(&x).unwrap();
        assert_eq!(add_noise(&z, Snr::Clean, 3).unwrap(), z);
        let a = add_noise(&z, Snr::Db(10.0), 3).unwrap();
        let b = add_noise(&z, Snr::Db(10.0), 3).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            add_noise_real(&[0.0; 8], Snr::Db(10.0), 0),
            Err(Error::UndefinedSnr)
        ));
    }

    #[test]
    fn snr_serializes_as_number_or_clean() {
        assert_eq!(serde_json::to_string(&Snr::Clean).unwrap(), "\"clean\"");
        assert_eq!(serde_json::to_string(&Snr::Db(45.0)).unwrap(), "45.0");
        let s: Snr = serde_json::from_str("\"clean\"").unwrap();
        assert_eq!(s, Snr::Clean);
        let s: Snr = serde_json::from_str("15").unwrap();
        assert_eq!(s, Snr::Db(15.0));
        assert!(serde_json::from_str::<Snr>("\"loud\"").is_err());
    }

    #[test]
    fn ideal_tfd_single_unit_lfm() {
        let spec = MixtureSpec {
            components: vec![lfm(0.001, 0.1)],
            n: 64,
            snr: Snr::Clean,
            seed: 0,
        };
        let m = spec.ideal_tfd().unwrap();
        for t in 0..64 {
            let row = m.row(t);
            assert_eq!(row.iter().filter(|v| **v != 0.0).count(), 1);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ideal_tfd_crossing_and_mass() {
        let spec = MixtureSpec {
            components: vec![
                ReferenceComponent::FallingChirp.spec(),
                ReferenceComponent::RisingChirp.spec(),
            ],
            n: 256,
            snr: Snr::Db(45.0),
            seed: 1,
        };
        let m = spec.ideal_tfd().unwrap();
        // IF crossing: 0.29 − 0.0006 t = 0.109 + 0.0012 t  ⇒  t = 100.56.
        let crossing = 0.181 / 0.0018;
        assert!((crossing - 100.6f64).abs() < 0.05);
        let env = Envelope::reference();
        let mut mass = 0.0;
        for t in 0..256 {
            let a2 = env.at(t as f64).powi(2);
            mass += 2.0 * a2;
            let nz = m.row(t).iter().filter(|v| **v != 0.0).count();
            let k1 = (512.0 * spec.components[0].if_law(t as f64)).round();
            let k2 = (512.0 * spec.components[1].if_law(t as f64)).round();
            if k1 == k2 {
                assert_eq!(nz, 1, "t = {t}");
                assert!((m.get(t, k1 as usize) - 2.0 * a2).abs() < 1e-15);
            } else {
                assert_eq!(nz, 2, "t = {t}");
            }
        }
        assert!((m.sum() - mass).abs() < 1e-9);
    }

    #[test]
    fn ideal_tfd_coincident_bins_sum() {
        let c = lfm(0.001, 0.1);
        let spec = MixtureSpec {
            components: vec![c, c],
            n: 32,
            snr: Snr::Clean,
            seed: 0,
        };
        let m = spec.ideal_tfd().unwrap();
        for t in 0..32 {
            let row = m.row(t);
            assert_eq!(row.iter().filter(|v| **v != 0.0).count(), 1);
            assert!((row.iter().sum::<f64>() - 2.0).abs() < 1e-9);
        }
    }
}
