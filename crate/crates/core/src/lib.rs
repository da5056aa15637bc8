//! Quadratic time-frequency distributions (Wigner-Ville, ambiguity function,
//! Cohen's class) together with a learned smoothing network that maps a noisy
//! Wigner-Ville distribution onto a cross-term free, high-resolution TFD.
//!
//! The crate is organized bottom-up:
//!
//! * [`signal`] synthesizes AM-LFM / AM-SFM components, analytic signals,
//!   calibrated noise and ideal "model" TFDs.
//! * [`tfd`] holds the discrete WVD, ambiguity function and classical kernels.
//! * [`metrics`] implements the l1 distance to model and Renyi entropy.
//! * [`nn`] is a small CPU network library with hand-derived gradients and the
//!   dilated-conv / squeeze-excitation smoothing network built from it.
//! * [`train`] runs MSE training and the evaluation sweep.
//! * [`dataset`] and [`io`] persist everything to disk.

pub mod dataset;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod signal;
pub mod tfd;
pub mod train;

pub use error::{Error, Result};
pub use signal::{ComponentSpec, Envelope, MixtureSpec, Modulation, Signal, Snr};
pub use tfd::{AfMatrix, KernelSpec, TfMatrix};
