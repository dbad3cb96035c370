use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use strokedetect_core::detector::DetectorConfig;
use strokedetect_core::flow::FlowConfig;
use strokedetect_core::model::ModelConfig;
use strokedetect_core::synth::SynthConfig;
use strokedetect_core::trainer::TrainConfig;
use strokedetect_core::SamplingConfig;

use crate::errors::{io_error, CliError};

/// Video counts per split written by the synth command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_videos: 2,
            val_videos: 1,
            test_videos: 1,
        }
    }
}

/// Temporal IoU thresholds the eval command scores against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.5],
        }
    }
}

/// Optional on-disk cache for computed flow fields.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub flow_dir: Option<PathBuf>,
}

/// Full run configuration: one section per pipeline stage, each falling
/// back to its module defaults when absent. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub flow: FlowConfig,
    pub detector: DetectorConfig,
    pub sampling: SamplingConfig,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub eval: EvalConfig,
    pub cache: CacheConfig,
}

impl RunConfig {
    /// Reads a TOML or JSON config, chosen by extension; with neither
    /// extension, TOML is tried first and JSON second.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let body = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let schema = |detail: String| {
            CliError::Config(format!("{}: invalid config: {detail}", path.display()))
        };
        match ext.as_deref() {
            Some("json") => serde_json::from_str(&body).map_err(|e| schema(e.to_string())),
            Some("toml") => toml::from_str(&body).map_err(|e| schema(e.to_string())),
            _ => toml::from_str(&body).or_else(|toml_err| {
                serde_json::from_str(&body).map_err(|json_err| {
                    schema(format!("not TOML ({toml_err}) nor JSON ({json_err})"))
                })
            }),
        }
    }

    /// Loads `path` when given, otherwise every section at its defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig, CliError> {
        match path {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}
