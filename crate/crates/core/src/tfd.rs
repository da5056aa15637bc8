//! Discrete Wigner-Ville distribution, ambiguity function and Cohen's-class
//! smoothing with signal-independent kernels.
//!
//! Everything is built from one shared array, the lag-limited instantaneous
//! autocorrelation `K[n, m] = z[n + m]·conj(z[n − m])` with
//! `|m| ≤ min(n, N − 1 − n, N/2 − 1)`. Lags are stored wrapped to
//! non-negative indices (`m mod N`). A row DFT over `m` gives the WVD, with
//! frequency bin `k` at `k / (2N)` cycles/sample; a DFT over `n` gives the
//! ambiguity function.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Signal;

/// Real time-frequency grid, row = time sample, column = frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct TfMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TfMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TfMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::shape((rows, cols), data.len()));
        }
        Ok(TfMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy scaled so the largest absolute entry is 1; all-zero stays zero.
    pub fn peak_normalized(&self) -> TfMatrix {
        let peak = self.max_abs();
        let mut out = self.clone();
        if peak > 0.0 {
            out.data.iter_mut().for_each(|v| *v /= peak);
        }
        out
    }
}

/// Dense complex matrix used for the lag and ambiguity domains.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.cols + col]
    }

    fn transposed(&self) -> ComplexMatrix {
        let mut out = ComplexMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Largest relative difference `|a − b| / max|a|`.
    pub fn max_rel_diff(&self, other: &ComplexMatrix) -> f64 {
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Ambiguity function on a centered grid: row `i` is Doppler
/// `(i − N/2)/N` cycles/sample, column `j` is half-lag `m = j − N/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AfMatrix {
    pub n: usize,
    pub data: Vec<Complex64>,
}

impl AfMatrix {
    pub fn origin(&self) -> Complex64 {
        self.at(0, 0)
    }

    /// Value at Doppler bin `doppler` and half-lag `lag`, both signed.
    pub fn at(&self, doppler: isize, lag: isize) -> Complex64 {
        let half = (self.n / 2) as isize;
        let i = (doppler + half) as usize;
        let j = (lag + half) as usize;
        self.data[i * self.n + j]
    }

    pub fn doppler_of_row(&self, i: usize) -> f64 {
        (i as f64 - (self.n / 2) as f64) / self.n as f64
    }
}

/// Whether an input looks like an analytic signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Analyticity {
    Analytic,
    /// Fraction of the energy found at negative frequencies.
    NonAnalytic { negative_energy: f64 },
}

/// Negative-frequency energy fraction above which an input is flagged.
pub const ANALYTIC_TOLERANCE: f64 = 1e-6;

pub fn analyticity(z: &Signal) -> Analyticity {
    let n = z.len();
    if n < 2 {
        return Analyticity::Analytic;
    }
    let mut buf = z.samples.clone();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let total: f64 = buf.iter().map(|v| v.norm_sqr()).sum();
    if total == 0.0 {
        return Analyticity::Analytic;
    }
    let negative: f64 = buf[n / 2 + 1..].iter().map(|v| v.norm_sqr()).sum();
    let fraction = negative / total;
    if fraction > ANALYTIC_TOLERANCE {
        Analyticity::NonAnalytic {
            negative_energy: fraction,
        }
    } else {
        Analyticity::Analytic
    }
}

fn check_length(z: &Signal) -> Result<usize> {
    let n = z.len();
    if n == 0 || n % 2 != 0 {
        return Err(Error::UnsupportedLength(n));
    }
    Ok(n)
}

/// Largest admissible half-lag at time `n` for an `len`-sample signal.
pub fn lag_limit(n: usize, len: usize) -> usize {
    n.min(len - 1 - n).min(len / 2 - 1)
}

/// Lag-limited instantaneous autocorrelation, lags wrapped to `m mod N`.
pub fn instantaneous_autocorrelation(z: &Signal) -> Result<ComplexMatrix> {
    let n = check_length(z)?;
    let s = &z.samples;
    let mut k = ComplexMatrix::zeros(n, n);
    for t in 0..n {
        let limit = lag_limit(t, n);
        let row = &mut k.data[t * n..(t + 1) * n];
        row[0] = s[t] * s[t].conj();
        for m in 1..=limit {
            let v = s[t + m] * s[t - m].conj();
            row[m] = v;
            row[n - m] = v.conj();
        }
    }
    Ok(k)
}

fn fft_rows(m: &mut ComplexMatrix, fft: &Arc<dyn Fft<f64>>) {
    let cols = m.cols;
    m.data
        .par_chunks_mut(cols)
        .for_each(|row| fft.process(row));
}

/// Row DFT over lag, before taking the real part.
pub fn wvd_complex_from_lags(k: &ComplexMatrix) -> ComplexMatrix {
    let mut w = k.clone();
    let fft = FftPlanner::new().plan_fft_forward(k.cols);
    fft_rows(&mut w, &fft);
    w
}

/// Inverse of [`wvd_complex_from_lags`].
pub fn lags_from_wvd_complex(w: &ComplexMatrix) -> ComplexMatrix {
    let mut k = w.clone();
    let fft = FftPlanner::new().plan_fft_inverse(w.cols);
    fft_rows(&mut k, &fft);
    let scale = 1.0 / w.cols as f64;
    k.data.iter_mut().for_each(|v| *v *= scale);
    k
}

/// Forward DFT over time for every lag, returned uncentered with rows =
/// Doppler bin and columns = wrapped lag.
pub fn doppler_lag_from_lags(k: &ComplexMatrix) -> ComplexMatrix {
    let mut a = k.transposed();
    let fft = FftPlanner::new().plan_fft_forward(k.rows);
    fft_rows(&mut a, &fft);
    a.transposed()
}

fn centered(a: &ComplexMatrix) -> AfMatrix {
    let n = a.rows;
    let half = n / 2;
    let mut data = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            let ci = (i + half) % n;
            let cj = (j + half) % n;
            data[ci * n + cj] = a.data[i * n + j];
        }
    }
    AfMatrix { n, data }
}

fn real_part(w: &ComplexMatrix) -> TfMatrix {
    TfMatrix {
        rows: w.rows,
        cols: w.cols,
        data: w.data.iter().map(|v| v.re).collect(),
    }
}

pub fn wvd(z: &Signal) -> Result<TfMatrix> {
    wvd_with_status(z).map(|(w, _)| w)
}

/// WVD plus an analyticity flag; non-analytic inputs are processed anyway
/// but are prone to aliasing.
pub fn wvd_with_status(z: &Signal) -> Result<(TfMatrix, Analyticity)> {
    let k = instantaneous_autocorrelation(z)?;
    let status = analyticity(z);
    if let Analyticity::NonAnalytic { negative_energy } = status {
        log::warn!(
            "WVD input is not analytic ({:.2e} of its energy at negative frequencies); expect aliasing",
            negative_energy
        );
    }
    Ok((real_part(&wvd_complex_from_lags(&k)), status))
}

pub fn ambiguity(z: &Signal) -> Result<AfMatrix> {
    let k = instantaneous_autocorrelation(z)?;
    Ok(centered(&doppler_lag_from_lags(&k)))
}

/// Signal-independent smoothing kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    AllPass,
    /// Choi-Williams, `exp(−(θ̃·τ̃)²/σ)` on radian-scaled axes `θ̃ = 2πθ`, `τ̃ = 2πτ`.
    Cwd { sigma: f64 },
    /// Compact kernel with Doppler support `D` and lag support `E`.
    Ckd { c: f64, d: f64, e: f64 },
    /// B-distribution, applied as time smoothing by a `cosh^(−2β)` window.
    Bd { beta: f64 },
}

impl KernelSpec {
    pub const DEFAULT_CWD_SIGMA: f64 = 0.05;
    pub const DEFAULT_CKD: (f64, f64, f64) = (1.0, 0.1, 0.1);
    pub const DEFAULT_BD_BETA: f64 = 0.01;

    pub fn cwd() -> Self {
        KernelSpec::Cwd {
            sigma: Self::DEFAULT_CWD_SIGMA,
        }
    }

    pub fn ckd() -> Self {
        let (c, d, e) = Self::DEFAULT_CKD;
        KernelSpec::Ckd { c, d, e }
    }

    pub fn bd() -> Self {
        KernelSpec::Bd {
            beta: Self::DEFAULT_BD_BETA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::AllPass => "allpass",
            KernelSpec::Cwd { .. } => "cwd",
            KernelSpec::Ckd { .. } => "ckd",
            KernelSpec::Bd { .. } => "bd",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid("kernel", format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            KernelSpec::AllPass => Ok(()),
            KernelSpec::Cwd { sigma } => positive("sigma", sigma),
            KernelSpec::Bd { beta } => positive("beta", beta),
            KernelSpec::Ckd { c, d, e } => {
                positive("c", c)?;
                for (name, v) in [("D", d), ("E", e)] {
                    if !(v > 0.0 && v <= 0.5) {
                        return Err(Error::invalid(
                            "kernel",
                            format!("CKD {name} must lie in (0, 0.5], got {v}"),
                        ));
                    }
                }
                Ok(())
            }
        }
    }
}

/// `ln Γ(β + iy)·Γ(β − iy) − 2 ln Γ(β)` via the product
/// `Π_k (1 + y²/(β + k)²)^(−1)` with an integral tail correction.
fn bd_log_magnitude(beta: f64, y: f64) -> f64 {
    const TERMS: usize = 20_000;
    let y2 = y * y;
    let mut acc = 0.0;
    for k in 0..TERMS {
        let b = beta + k as f64;
        acc += (y2 / (b * b)).ln_1p();
    }
    acc += y2 / (beta + TERMS as f64 - 0.5);
    -acc
}

/// Kernel weight at normalized Doppler `theta` and normalized lag `tau`,
/// both in `[−0.5, 0.5)`.
pub fn kernel_eval(spec: &KernelSpec, theta: f64, tau: f64) -> Result<f64> {
    spec.validate()?;
    Ok(kernel_weight(spec, theta, tau))
}

fn kernel_weight(spec: &KernelSpec, theta: f64, tau: f64) -> f64 {
    match *spec {
        KernelSpec::AllPass => 1.0,
        KernelSpec::Cwd { sigma } => {
            let p = (2.0 * PI * theta) * (2.0 * PI * tau);
            (-(p * p) / sigma).exp()
        }
        KernelSpec::Ckd { c, d, e } => {
            if theta.abs() >= d || tau.abs() >= e {
                return 0.0;
            }
            let dop = c * d * d / (theta * theta - d * d);
            let lag = c * e * e / (tau * tau - e * e);
            (2.0 * c + dop + lag).exp()
        }
        // |Γ(β + jπθ)|² / Γ(β)², the Fourier magnitude of sech^(2β)(t).
        KernelSpec::Bd { beta } => bd_log_magnitude(beta, PI * theta).exp(),
    }
}

/// Unit-sum `cosh^(−2β)(j)` window for `j = −(N−1)..=(N−1)`.
pub fn bd_window(beta: f64, n: usize) -> Vec<f64> {
    let span = n as isize - 1;
    let mut w: Vec<f64> = (-span..=span)
        .map(|j| (j as f64).cosh().powf(-2.0 * beta))
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

fn fftfreq(i: usize, n: usize) -> f64 {
    let i = i as isize;
    let n_i = n as isize;
    let signed = if i < (n_i + 1) / 2 { i } else { i - n_i };
    signed as f64 / n as f64
}

/// Cohen's-class distribution with a signal-independent kernel.
///
/// `AllPass` is the WVD itself. CWD and CKD weight the ambiguity function on
/// the normalized (Doppler, lag) grid. BD smooths each lag slice of the
/// autocorrelation over time with [`bd_window`].
pub fn cohen_tfd(z: &Signal, spec: &KernelSpec) -> Result<TfMatrix> {
    spec.validate()?;
    if let KernelSpec::AllPass = spec {
        return wvd(z);
    }
    let k = instantaneous_autocorrelation(z)?;
    let n = k.rows;
    let smoothed = match *spec {
        KernelSpec::Bd { beta } => bd_smooth(&k, beta),
        _ => {
            // lag-major so each row is one lag slice over time
            let mut a = k.transposed();
            let mut planner = FftPlanner::new();
            let fwd = planner.plan_fft_forward(n);
            let inv = planner.plan_fft_inverse(n);
            let scale = 1.0 / n as f64;
            a.data
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(m, slice)| {
                    let tau = fftfreq(m, n);
                    fwd.process(slice);
                    for (i, v) in slice.iter_mut().enumerate() {
                        *v *= kernel_weight(spec, fftfreq(i, n), tau) * scale;
                    }
                    inv.process(slice);
                });
            a.transposed()
        }
    };
    Ok(real_part(&wvd_complex_from_lags(&smoothed)))
}

fn bd_smooth(k: &ComplexMatrix, beta: f64) -> ComplexMatrix {
    let n = k.rows;
    let window = bd_window(beta, n);
    let center = n - 1;
    let lag_major = k.transposed();
    let mut out = ComplexMatrix::zeros(n, n);
    out.data
        .par_chunks_mut(n)
        .zip(lag_major.data.par_chunks(n))
        .for_each(|(dst, src)| {
            for (t, d) in dst.iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (s, v) in src.iter().enumerate() {
                    acc += v * window[center + t - s];
                }
                *d = acc;
            }
        });
    out.transposed()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(n: usize, bins: &[f64]) -> Signal {
        Signal::new(
            (0..n)
                .map(|t| {
                    bins.iter()
                        .map(|b| Complex64::from_polar(1.0, 2.0 * PI * b / (2.0 * n as f64) * t as f64))
                        .sum()
                })
                .collect(),
        )
    }

    fn argmax(row: &[f64]) -> usize {
        (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
    }

    #[test]
    fn tone_ridge_on_every_row() {
        let w = wvd(&tone(64, &[16.0])).unwrap();
        // rows 0 and 63 only see lag 0 and are flat
        for t in 1..63 {
            assert_eq!(argmax(w.row(t)), 16, "row {t}");
        }
    }

    #[test]
    fn zero_signal_gives_zero_matrix() {
        let z = Signal::new(vec![Complex64::new(0.0, 0.0); 32]);
        assert!(wvd(&z).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn odd_length_rejected() {
        let z = Signal::new(vec![Complex64::new(1.0, 0.0); 7]);
        assert!(matches!(wvd(&z), Err(Error::UnsupportedLength(7))));
    }

    #[test]
    fn two_tone_cross_term_at_midpoint() {
        let w = wvd(&tone(64, &[12.0, 36.0])).unwrap();
        let mut signs = Vec::new();
        for t in 16..48 {
            let row = w.row(t);
            for k in [12, 36] {
                assert!(row[k] >= row[k - 1] && row[k] >= row[k + 1], "row {t} bin {k}");
            }
            signs.push(row[24].signum());
        }
        assert!(signs.windows(2).any(|p| p[0] != p[1]));
        assert!(signs.iter().any(|s| *s > 0.0) && signs.iter().any(|s| *s < 0.0));
    }

    #[test]
    fn ambiguity_origin_is_energy_and_bounds_everything() {
        let z = tone(64, &[16.0]);
        let a = ambiguity(&z).unwrap();
        assert!((a.origin().re - 64.0).abs() < 1e-9);
        assert!(a.origin().im.abs() < 1e-9);
        let bound = a.origin().norm() * (1.0 + 1e-12);
        assert!(a.data.iter().all(|v| v.norm() <= bound));
    }

    #[test]
    fn two_tone_ambiguity_separates_auto_and_cross_terms() {
        let a = ambiguity(&tone(64, &[12.0, 36.0])).unwrap();
        let row_mass = |d: isize| -> f64 { (-31..32).map(|m| a.at(d, m).norm()).sum() };
        let auto = row_mass(0);
        // (36 − 12)/128 cycles/sample = 12 Doppler bins of 1/64
        let cross = row_mass(12) + row_mass(-12);
        let elsewhere = [6, -6, 20, -20].map(row_mass).into_iter().fold(0.0, f64::max);
        assert!(auto > elsewhere * 5.0);
        assert!(cross > elsewhere * 5.0);
        assert!((a.doppler_of_row(32 + 12) - 24.0 / 128.0).abs() < 1e-12);
    }

    #[test]
    fn non_analytic_input_is_flagged() {
        let z = Signal::new(
            (0..64)
                .map(|t| Complex64::new((2.0 * PI * 0.1 * t as f64).cos(), 0.0))
                .collect(),
        );
        let (_, status) = wvd_with_status(&z).unwrap();
        assert!(matches!(status, Analyticity::NonAnalytic { .. }));
        let (_, status) = wvd_with_status(&tone(64, &[10.0])).unwrap();
        assert_eq!(status, Analyticity::Analytic);
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_eval(&KernelSpec::AllPass, 0.3, -0.2).unwrap(), 1.0);
        for tau in [-0.5, -0.1, 0.0, 0.25, 0.49] {
            assert_eq!(kernel_eval(&KernelSpec::cwd(), 0.0, tau).unwrap(), 1.0);
        }
        assert_eq!(kernel_eval(&KernelSpec::ckd(), 0.0, 0.1).unwrap(), 0.0);
        assert_eq!(kernel_eval(&KernelSpec::ckd(), 0.0, -0.1).unwrap(), 0.0);
        assert!((kernel_eval(&KernelSpec::ckd(), 0.0, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((kernel_eval(&KernelSpec::bd(), 0.0, 0.2).unwrap() - 1.0).abs() < 1e-12);
        for spec in [KernelSpec::cwd(), KernelSpec::ckd(), KernelSpec::bd()] {
            for theta in [-0.4, -0.05, 0.1, 0.3] {
                let v = kernel_eval(&spec, theta, 0.2).unwrap();
                assert!((0.0..=1.0).contains(&v), "{spec:?} {theta} {v}");
            }
        }
    }

    #[test]
    fn bd_doppler_magnitude_matches_closed_form() {
        // β = 1: |Γ(1 + iy)|² = πy / sinh(πy)
        let y: f64 = PI * 0.2;
        let expected = PI * y / (PI * y).sinh();
        let got = kernel_eval(&KernelSpec::Bd { beta: 1.0 }, 0.2, 0.0).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn kernel_parameters_are_validated() {
        assert!(KernelSpec::Cwd { sigma: 0.0 }.validate().is_err());
        assert!(KernelSpec::Bd { beta: -1.0 }.validate().is_err());
        assert!(KernelSpec::Ckd { c: 1.0, d: 0.6, e: 0.1 }.validate().is_err());
        assert!(KernelSpec::Ckd { c: 1.0, d: 0.1, e: 0.0 }.validate().is_err());
        assert!(kernel_eval(&KernelSpec::Cwd { sigma: -1.0 }, 0.0, 0.0).is_err());
    }

    #[test]
    fn allpass_is_the_wvd() {
        let z = tone(64, &[12.0, 36.0]);
        assert_eq!(cohen_tfd(&z, &KernelSpec::AllPass).unwrap(), wvd(&z).unwrap());
    }

    #[test]
    fn bd_window_has_unit_sum_and_peaks_at_center() {
        let w = bd_window(0.01, 64);
        assert_eq!(w.len(), 127);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&w), 63);
    }
}
