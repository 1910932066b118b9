//! TOML run configuration. Every field has a default so a config file only
//! states what it overrides; the fully resolved config is echoed into the
//! run manifest so a manifest alone reproduces a run.

use serde::{Deserialize, Serialize};
use std::path::Path;
use tpconv_core::data::{SyntheticConfig, TwoFreqConfig};
use tpconv_core::error::{Error, Result};
use tpconv_core::models::Task;
use tpconv_core::timefuncs::{ActivationId, TimeFunctionId};
use tpconv_core::tpc::Aggregation;
use tpconv_core::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Interpolation,
    Classification,
}

/// Config for `tpconv generate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub kind: DatasetKind,
    pub synthetic: SyntheticConfig,
    pub two_freq: TwoFreqConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            kind: DatasetKind::Interpolation,
            synthetic: SyntheticConfig::default(),
            two_freq: TwoFreqConfig::default(),
        }
    }
}

/// Architecture section of a training run. `seq_len = 0` and
/// `num_classes = 0` mean "infer from the dataset".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub tpc_p: usize,
    pub tpc_z: usize,
    pub functions: Vec<String>,
    pub sigma: ActivationId,
    pub aggregation: Aggregation,
    /// None picks the task default: no convs for interpolation, [64, 64]
    /// for classification
    pub conv_channels: Option<Vec<usize>>,
    pub conv_ksize: usize,
    pub latent_dim: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub seq_len: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            tpc_p: 32,
            tpc_z: 2,
            functions: vec!["sin".to_string()],
            sigma: ActivationId::Sigmoid,
            aggregation: Aggregation::Mean,
            conv_channels: None,
            conv_ksize: 5,
            latent_dim: 64,
            head_hidden: 128,
            num_classes: 0,
            seq_len: 0,
        }
    }
}

impl ArchConfig {
    pub fn parse_functions(&self) -> Result<Vec<TimeFunctionId>> {
        if self.functions.is_empty() {
            return Err(Error::config("functions list is empty".to_string()));
        }
        self.functions.iter().map(|s| s.parse()).collect()
    }
}

/// Data-handling section: split fractions and time normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub split: Vec<f64>,
    pub normalize_times: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            split: vec![0.64, 0.16, 0.20],
            normalize_times: true,
        }
    }
}

/// Full training-run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", p.display())))
        }
    }
}

pub fn task_from_flag(s: &str) -> Result<Task> {
    match s {
        "interp" => Ok(Task::Interpolation),
        "cls" => Ok(Task::Classification),
        "step-cls" => Ok(Task::PerStepClassification),
        other => Err(Error::config(format!(
            "unknown task '{other}' (expected interp, cls or step-cls)"
        ))),
    }
}

/// "sin+cos" -> [Sin, Cos]; used by the ablation command.
pub fn parse_function_set(s: &str) -> Result<Vec<TimeFunctionId>> {
    let parts: Vec<&str> = s.split('+').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed function set '{s}'")));
    }
    parts.iter().map(|p| p.parse()).collect()
}
