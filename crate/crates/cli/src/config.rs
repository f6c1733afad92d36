//! Run configuration: a JSON file merged with command-line overrides, and
//! written back verbatim next to every command's outputs.

use std::path::{Path, PathBuf};

use seco::networks::ModelConfig;
use seco::online_matching::OmConfig;
use seco::pipeline::SpectrogramConfig;
use seco::synthdata::SynthConfig;
use seco::trainer::TrainConfig;
use seco::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of cross-category test pairs.
    pub test_pairs: usize,
    pub test_seed: u64,
    pub filter_len: usize,
    /// Step counts scored by `sweep`.
    pub om_iters: Vec<usize>,
    /// Worker threads for per-pair evaluation.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_pairs: 300,
            test_seed: 0,
            filter_len: seco::bsseval::DEFAULT_FILTER_LEN,
            om_iters: vec![0, 1, 2, 5, 10],
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub spectrogram: SpectrogramConfig,
    pub train: TrainConfig,
    pub online_matching: OmConfig,
    pub eval: EvalConfig,
}

/// A parsed config file, remembering which sections it spelled out.
#[derive(Clone, Debug, Default)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub explicit: Vec<String>,
}

impl LoadedConfig {
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(LoadedConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let explicit = value
            .as_object()
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default();
        let config = serde_json::from_value(value)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        Ok(LoadedConfig { config, explicit })
    }

    pub fn is_explicit(&self, section: &str) -> bool {
        self.explicit.iter().any(|s| s == section)
    }
}

impl RunConfig {
    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("no output directory (--out)".into()))
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("no dataset directory (--data)".into()))
    }

    pub fn model_path(&self) -> Result<&Path> {
        self.model_path
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("no model checkpoint (--model)".into()))
    }

    /// Writes the configuration into the output directory.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        let dir = self.out_dir()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}
