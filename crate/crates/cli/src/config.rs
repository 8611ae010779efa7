use std::path::{Path, PathBuf};

use anyhow::Context;
use coevo_core::exec::RunSpec;
use coevo_core::gateway::{ProviderConfig, SamplingConfig};
use coevo_core::parse::ThinkDelimiters;
use coevo_core::reward::RewardMode;
use serde::Deserialize;

use crate::UsageError;

/// Default artifact locations.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub tasks: Option<PathBuf>,
    pub codes: Option<PathBuf>,
    pub tests: Option<PathBuf>,
    pub matrices: Option<PathBuf>,
    pub rewards: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub mode: Option<RewardMode>,
    pub long_cot: Option<bool>,
}

/// Everything a pipeline run can be configured with. Command-line flags take
/// precedence over values read from the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub run: RunSpec,
    pub sampling: Option<SamplingConfig>,
    pub provider: Option<ProviderConfig>,
    pub reward: RewardSection,
    pub think: ThinkDelimiters,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let config: Self = toml::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        config
            .run
            .validate()
            .with_context(|| format!("invalid [run] section in {}", path.display()))
            .map_err(|e| UsageError(format!("{e:#}")))?;
        Ok(config)
    }

    pub fn seed(&self, flag: Option<u64>) -> anyhow::Result<u64> {
        flag.or(self.seed)
            .ok_or_else(|| UsageError("a seed is required (--seed or `seed` in the config file)".into()).into())
    }
}

/// Resolves a path from a flag or the config, failing with a usage error.
pub fn require_path(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| UsageError(format!("missing {what} path")).into())
}
