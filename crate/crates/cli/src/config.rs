use std::path::Path;

use attnlab::evalharness::DatasetConfig;
use attnlab::model::ModelConfig;
use attnlab::trainer::TrainConfig;
use attnlab::Result;
use serde::{Deserialize, Serialize};

pub const DEFAULT_COT_BUDGET: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Token budget for chain-of-thought generation.
    pub budget: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            budget: DEFAULT_COT_BUDGET,
        }
    }
}

/// Contents of a `--config` file. Every section is optional; flags given on
/// the command line override the file, the file overrides the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalSettings,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
            None => Ok(Self::default()),
        }
    }
}
