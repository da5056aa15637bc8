//! Randomized LFM + SFM training mixtures, persisted as (signal, WVD, model
//! TFD) triples plus a JSON manifest.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tfd, write_signal, write_tfd};
use crate::signal::{ComponentSpec, Envelope, MixtureSpec, Modulation, Snr};
use crate::tfd::{wvd, TfMatrix};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT: &str = "tfkl-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Sampling ranges. Frequencies are normalized (cycles per sample), envelope
/// center and width are fractions of N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParameterRanges {
    pub lfm_freq: [f64; 2],
    pub sfm_carrier: [f64; 2],
    /// Number of modulation periods across the N samples.
    pub sfm_periods: [f64; 2],
    /// IF excursion as a fraction of the largest excursion that keeps the
    /// IF `band_margin` away from both band edges.
    pub sfm_excursion: [f64; 2],
    pub band_margin: f64,
    pub envelope_center: [f64; 2],
    pub envelope_width: [f64; 2],
}

impl Default for ParameterRanges {
    fn default() -> Self {
        ParameterRanges {
            lfm_freq: [0.05, 0.45],
            sfm_carrier: [0.15, 0.35],
            sfm_periods: [1.0, 3.0],
            sfm_excursion: [0.3, 0.9],
            band_margin: 0.05,
            envelope_center: [0.35, 0.65],
            envelope_width: [0.25, 0.6],
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
        return Err(Error::invalid(
            "parameter range",
            format!("{name} = [{}, {}] is empty or degenerate", r[0], r[1]),
        ));
    }
    if r[0] < lo || r[1] > hi {
        return Err(Error::invalid(
            "parameter range",
            format!("{name} = [{}, {}] must lie within [{lo}, {hi}]", r[0], r[1]),
        ));
    }
    Ok(())
}

impl ParameterRanges {
    pub fn validate(&self) -> Result<()> {
        let m = self.band_margin;
        if !(m > 0.0 && m < 0.25) {
            return Err(Error::invalid("parameter range", format!("band_margin {m} must lie in (0, 0.25)")));
        }
        check_range("lfm_freq", self.lfm_freq, m, 0.5 - m)?;
        // the carrier must sit strictly inside the margins so that some excursion is possible
        check_range("sfm_carrier", self.sfm_carrier, m, 0.5 - m)?;
        if self.sfm_carrier[0] == m || self.sfm_carrier[1] == 0.5 - m {
            return Err(Error::invalid("parameter range", "sfm_carrier may not touch the band margin"));
        }
        check_range("sfm_periods", self.sfm_periods, f64::MIN_POSITIVE, f64::MAX)?;
        check_range("sfm_excursion", self.sfm_excursion, 0.0, 1.0)?;
        check_range("envelope_center", self.envelope_center, 0.0, 1.0)?;
        check_range("envelope_width", self.envelope_width, f64::MIN_POSITIVE, f64::MAX)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    pub n: usize,
    pub snr: Snr,
    pub seed: u64,
    pub lfm_components: usize,
    pub sfm_components: usize,
    pub ranges: ParameterRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 1000,
            n: 64,
            snr: Snr::Db(45.0),
            seed: 0,
            lfm_components: 1,
            sfm_components: 1,
            ranges: ParameterRanges::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("dataset", "count must be at least 1"));
        }
        if self.n < crate::signal::MIN_SAMPLES || self.n % 2 != 0 {
            return Err(Error::UnsupportedLength(self.n));
        }
        if self.lfm_components + self.sfm_components == 0 {
            return Err(Error::invalid("dataset", "mixtures need at least one component"));
        }
        if let Snr::Db(db) = self.snr {
            if db.is_nan() {
                return Err(Error::invalid("dataset", "SNR is NaN"));
            }
        }
        self.ranges.validate()
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    rng.random_range(r[0]..r[1])
}

fn random_envelope(rng: &mut ChaCha8Rng, r: &ParameterRanges, n: f64) -> Envelope {
    Envelope {
        center: uniform(rng, r.envelope_center) * n,
        width: uniform(rng, r.envelope_width) * n,
    }
}

/// Linear chirp whose IF moves from `f_a` at t = 0 to `f_b` at t = N − 1.
pub fn random_lfm(rng: &mut ChaCha8Rng, r: &ParameterRanges, n: usize) -> ComponentSpec {
    let f_a = uniform(rng, r.lfm_freq);
    let f_b = uniform(rng, r.lfm_freq);
    let modulation = Modulation::Lfm {
        chirp_rate: (f_b - f_a) / (2.0 * (n - 1) as f64),
        start_freq: f_a,
        t0: n as f64 / 2.0,
    };
    ComponentSpec {
        modulation,
        envelope: random_envelope(rng, r, n as f64),
    }
}

pub fn random_sfm(rng: &mut ChaCha8Rng, r: &ParameterRanges, n: usize) -> ComponentSpec {
    let carrier = uniform(rng, r.sfm_carrier);
    let periods = uniform(rng, r.sfm_periods);
    let phase = rng.random_range(-PI..PI);
    let rate = 2.0 * PI * periods / n as f64;
    let max_excursion = (carrier - r.band_margin).min(0.5 - r.band_margin - carrier);
    let excursion = uniform(rng, r.sfm_excursion) * max_excursion;
    let modulation = Modulation::Sfm {
        carrier,
        depth: 2.0 * PI * excursion / rate,
        rate,
        phase,
        t0: n as f64 / 2.0,
    };
    ComponentSpec {
        modulation,
        envelope: random_envelope(rng, r, n as f64),
    }
}

/// Mixture `index` of the dataset; its generator is seeded with
/// `seed ^ index`, so every pair is independent of generation order.
pub fn sample_mixture(config: &DatasetConfig, index: usize) -> MixtureSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ index as u64);
    let mut components = Vec::with_capacity(config.lfm_components + config.sfm_components);
    for _ in 0..config.lfm_components {
        components.push(random_lfm(&mut rng, &config.ranges, config.n));
    }
    for _ in 0..config.sfm_components {
        components.push(random_sfm(&mut rng, &config.ranges, config.n));
    }
    MixtureSpec {
        components,
        n: config.n,
        snr: config.snr,
        seed: rng.random(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub index: usize,
    pub signal: String,
    pub wvd: String,
    pub model: String,
    pub mixture: MixtureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: DatasetConfig,
    pub pairs: Vec<PairEntry>,
}

impl DatasetManifest {
    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn mixtures(&self) -> Vec<MixtureSpec> {
        self.pairs.iter().map(|p| p.mixture.clone()).collect()
    }
}

pub fn pair_stem(index: usize) -> String {
    format!("pair_{index:05}")
}

/// Writes `count` pairs and `manifest.json` into `dir`, creating it if needed.
pub fn gen_dataset(config: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pairs = (0..config.count)
        .into_par_iter()
        .map(|index| {
            let mixture = sample_mixture(config, index);
            let signal = mixture.synthesize()?;
            let stem = pair_stem(index);
            let entry = PairEntry {
                index,
                signal: format!("{stem}.sig"),
                wvd: format!("{stem}.wvd.tfd"),
                model: format!("{stem}.model.tfd"),
                mixture,
            };
            write_signal(&dir.join(&entry.signal), &signal)?;
            write_tfd(&dir.join(&entry.wvd), &wvd(&signal)?)?;
            write_tfd(&dir.join(&entry.model), &entry.mixture.ideal_tfd()?)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        config: config.clone(),
        pairs,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A generated dataset on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

/// One (input WVD, target model TFD) pair, both already peak-scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: TfMatrix,
    pub target: TfMatrix,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
            return Err(Error::format(
                "dataset manifest",
                format!("unsupported format {} v{}", manifest.format, manifest.version),
            ));
        }
        if let Some(p) = manifest.pairs.iter().find(|p| p.mixture.n != manifest.config.n) {
            return Err(Error::format(
                "dataset manifest",
                format!("pair {} has N = {} but the dataset has N = {}", p.index, p.mixture.n, manifest.config.n),
            ));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.pairs.is_empty()
    }

    /// Loads every pair with the network's input and target scaling applied.
    pub fn load_pairs(&self) -> Result<Vec<TrainingPair>> {
        let n = self.manifest.n();
        self.manifest
            .pairs
            .par_iter()
            .map(|p| {
                let input = read_tfd(&self.dir.join(&p.wvd))?;
                let target = read_tfd(&self.dir.join(&p.model))?;
                for m in [&input, &target] {
                    if m.shape() != (n, n) {
                        return Err(Error::format(
                            "dataset",
                            format!("pair {} is {:?}, expected {n}x{n}", p.index, m.shape()),
                        ));
                    }
                }
                Ok(TrainingPair {
                    input: input.peak_normalized(),
                    target: target.peak_normalized(),
                })
            })
            .collect()
    }
}
