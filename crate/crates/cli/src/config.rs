use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tfkl_core::dataset::DatasetConfig;
use tfkl_core::nn::NetworkSpec;
use tfkl_core::train::{EvalConfig, TrainConfig};
use tfkl_core::{Error, KernelSpec, Result};

/// Everything a run can be configured with. A JSON config file may give any
/// subset of the sections; command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub network: NetworkSpec,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
    /// Kernel used by `smooth`.
    pub kernel: KernelSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            network: NetworkSpec::default(),
            training: TrainConfig::default(),
            evaluation: EvalConfig::default(),
            kernel: KernelSpec::AllPass,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("config", format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"dataset": {"count": 5}, "kernel": {"kind": "cwd", "sigma": 0.5}}"#).unwrap();
        assert_eq!(c.dataset.count, 5);
        assert_eq!(c.dataset.n, DatasetConfig::default().n);
        assert_eq!(c.kernel, KernelSpec::Cwd { sigma: 0.5 });
        assert_eq!(c.training, TrainConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"datasets": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"training": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
