//! Quality criteria for a TFD: l1 distance to the ideal model TFD and
//! Renyi entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tfd::TfMatrix;

pub const DEFAULT_RENYI_ORDER: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub snr_db: f64,
    pub l1_to_model: f64,
    pub renyi_bits: f64,
    pub trials: usize,
}

/// `Σ|â − b̂|` where each matrix is scaled to unit total absolute mass.
/// The result lies in `[0, 2]`.
pub fn l1_distance(a: &TfMatrix, b: &TfMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let mass_a = a.sum_abs();
    let mass_b = b.sum_abs();
    if !(mass_a > 0.0) || !(mass_b > 0.0) {
        return Err(Error::Domain(
            "l1 distance needs matrices with non-zero mass".into(),
        ));
    }
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x / mass_a - y / mass_b).abs())
        .sum())
}

/// Renyi entropy in bits, `log2(Σ â^α) / (1 − α)` with `â = a / Σa`.
/// Negative cells are kept as they are.
pub fn renyi_entropy(a: &TfMatrix, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) || alpha == 1.0 || !alpha.is_finite() {
        return Err(Error::invalid(
            "renyi order",
            format!("alpha must be positive and different from 1, got {alpha}"),
        ));
    }
    let total = a.sum();
    if !(total > 0.0) {
        return Err(Error::Domain(format!(
            "Renyi entropy needs positive total mass, got {total}"
        )));
    }
    let integer_order = alpha.fract() == 0.0;
    let moment: f64 = a
        .data()
        .iter()
        .map(|v| {
            let p = v / total;
            if integer_order {
                p.powi(alpha as i32)
            } else {
                p.signum() * p.abs().powf(alpha)
            }
        })
        .sum();
    if !(moment > 0.0) {
        return Err(Error::Domain(format!(
            "Renyi entropy needs a positive order-{alpha} moment, got {moment}"
        )));
    }
    Ok(moment.log2() / (1.0 - alpha))
}
