//! Experiment configuration files (TOML or JSON, chosen by extension).
//!
//! A config names one initialization arm (pretrained with natural temporal
//! crops, pretrained with the artificial pipeline, random init, or an
//! external checkpoint) and a set of downstream datasets to sweep. Defaults
//! mirror the library defaults; the resolved form is persisted in the run
//! manifest so every knob that produced a number is on disk next to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tempossl_core::eval::EvalConfig;
use tempossl_core::pretrain::PretrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationMode {
    /// Crops drawn across the T temporal views; no artificial transforms.
    NaturalTemporal,
    /// Crops from a single view with the flip/jitter/grayscale/blur
    /// pipeline; the comparison arm.
    ArtificialDino,
}

impl AugmentationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentationMode::NaturalTemporal => "natural_temporal",
            AugmentationMode::ArtificialDino => "artificial_dino",
        }
    }
}

/// Pretraining section: the core config plus its data source.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainSection {
    pub data_root: PathBuf,
    pub t: usize,
    #[serde(flatten)]
    pub config: PretrainConfig,
    /// Optional seeded subset of the pretraining scenes (scale studies).
    #[serde(default)]
    pub subset_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetRef {
    pub name: String,
    pub root: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(default = "default_mode")]
    pub augmentation_mode: AugmentationMode,
    /// Absent = random initialization (no pretraining stage).
    #[serde(default)]
    pub pretrain: Option<PretrainSection>,
    /// Evaluate a backbone produced elsewhere instead of pretraining.
    #[serde(default)]
    pub external_backbone: Option<PathBuf>,
    /// Backbone architecture for the random-init arm (used when neither
    /// `pretrain` nor `external_backbone` is set).
    #[serde(default)]
    pub random_init: Option<tempossl_core::network::BackboneConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    pub datasets: Vec<DatasetRef>,
}

fn default_mode() -> AugmentationMode {
    AugmentationMode::NaturalTemporal
}

impl ExperimentConfig {
    pub fn init_name(&self) -> &'static str {
        if self.external_backbone.is_some() {
            "external_checkpoint"
        } else if self.pretrain.is_none() {
            "random"
        } else {
            match self.augmentation_mode {
                AugmentationMode::NaturalTemporal => "s3tss",
                AugmentationMode::ArtificialDino => "dino_artificial",
            }
        }
    }

    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let mut warnings = Vec::new();
        if self.datasets.is_empty() {
            return Err(ConfigError::Invalid("no downstream datasets listed".into()));
        }
        if self.pretrain.is_some() && self.external_backbone.is_some() {
            return Err(ConfigError::Invalid(
                "pretrain and external_backbone are mutually exclusive".into(),
            ));
        }
        if self.pretrain.is_none() && self.external_backbone.is_none() && self.random_init.is_none()
        {
            return Err(ConfigError::Invalid(
                "no initialization arm: set pretrain, external_backbone, or random_init".into(),
            ));
        }
        if let Some(p) = &self.pretrain {
            if p.t == 0 {
                return Err(ConfigError::Invalid("pretrain.t must be at least 1".into()));
            }
            if self.augmentation_mode == AugmentationMode::NaturalTemporal && p.t < 2 {
                warnings.push(
                    "natural_temporal with T = 1: temporal augmentation is vacuous".into(),
                );
            }
            if let Some(f) = p.subset_fraction {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(ConfigError::Invalid(format!(
                        "subset_fraction {f} outside (0, 1]"
                    )));
                }
            }
        }
        Ok(warnings)
    }
}

/// Load a config file; `.toml` and `.json` are recognized. Parse errors
/// surface the parser's own line/column diagnostics.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let parse_err = |message: String| ConfigError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
        _ => toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
    };
    Ok(cfg)
}

/// Write a config (used to persist the resolved form into the manifest dir).
pub fn save_config(path: &Path, cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    let text = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::to_string_pretty(cfg).expect("config serializable"),
        _ => toml::to_string_pretty(cfg).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?,
    };
    fs::write(path, text).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
