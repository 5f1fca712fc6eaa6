use std::path::Path;

use anyhow::{Context, Result};
use sbof_core::eval::ExperimentConfig;
use sbof_core::isa::{CorpusConfig, RunConfig};
use serde::{Deserialize, Serialize};

/// Settings shared by every subcommand. Missing fields take their defaults,
/// so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub run: RunConfig,
    pub experiment: ExperimentConfig,
    /// Seeds of the ablation table.
    pub seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            run: RunConfig::default(),
            experiment: ExperimentConfig::default(),
            seeds: vec![1, 2, 3],
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
