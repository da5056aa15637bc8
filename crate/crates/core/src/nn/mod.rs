//! Minimal CNN machinery for the learned smoothing network, with hand-written
//! backward passes.

pub mod checkpoint;
pub mod conv;
pub(crate) mod gemm;
pub mod layers;
pub mod network;
pub mod se;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testing;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use network::{infer, init_params, Checkpoint, KlNet, NetworkSpec};
pub use tensor::{FeatureMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Arithmetic used inside the convolution matrix products. Parameters,
/// gradients and every other layer always stay in f64.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}
