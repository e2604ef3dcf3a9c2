//! Versioned TOML run configuration.
//!
//! Every table rejects unknown keys, and `version` must equal
//! [`SCHEMA_VERSION`]. Built-in presets are addressable by name wherever a
//! config path is accepted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::error::{NisError, Result};
use crate::model::ModelConfig;
use crate::reward::{ObjectiveKind, RewardConfig};
use crate::search_space::GridLayout;
use crate::tasks::{TaskConfig, TaskKind};
use crate::trainer::SearchConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Built-in configs: `(name, toml source)`.
pub const PRESETS: &[(&str, &str)] = &[
    ("toy_retrieval", include_str!("../configs/toy_retrieval.toml")),
    ("me_retrieval", include_str!("../configs/me_retrieval.toml")),
    ("toy_ranking", include_str!("../configs/toy_ranking.toml")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Training steps per candidate; defaults to the search's main-step count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default = "default_max_candidates")]
    pub max_candidates: usize,
}

fn default_max_candidates() -> usize {
    50
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            steps: None,
            max_candidates: default_max_candidates(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub reward: RewardConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    pub search: SearchConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| NisError::config(e.to_string()))?;
        match raw.get("version").and_then(|v| v.as_integer()) {
            Some(v) if v == SCHEMA_VERSION as i64 => {}
            Some(v) => {
                return Err(NisError::config(format!(
                    "config schema version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(NisError::config("config is missing an integer `version`")),
        }
        let config: RunConfig = toml::from_str(text).map_err(|e| NisError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a file, or a built-in preset when `source` names one and no
    /// such file exists.
    pub fn load(source: &str) -> Result<Self> {
        let path = Path::new(source);
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| NisError::io(path, e))?;
            return Self::from_toml(&text);
        }
        if let Some((_, text)) = PRESETS.iter().find(|(name, _)| *name == source) {
            return Self::from_toml(text);
        }
        Err(NisError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "config file not found"),
        ))
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| NisError::config(format!("no preset named `{name}`")))?;
        Self::from_toml(text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(NisError::config(format!("config schema version {} is not supported", self.version)));
        }
        self.task.validate()?;
        self.reward.validate()?;
        self.controller.validate()?;
        let s = &self.search;
        if s.steps == 0 || s.warmup() >= s.steps {
            return Err(NisError::config("need 0 <= warmup_steps < steps"));
        }
        if s.batch_size == 0 || s.controller_batch == 0 || s.main_steps_per_controller_step == 0 {
            return Err(NisError::config("batch sizes and the alternation ratio must be positive"));
        }
        if !(s.lr > 0.0) {
            return Err(NisError::config("search.lr must be positive"));
        }
        for name in s.grids.keys() {
            if !self.task.features.iter().any(|f| &f.name == name) {
                return Err(NisError::config(format!("grid given for unknown feature `{name}`")));
            }
        }
        match (self.task.kind, self.reward.objective) {
            (TaskKind::Retrieval, ObjectiveKind::RocAuc) => {
                return Err(NisError::config("roc_auc is a ranking objective"))
            }
            (TaskKind::Ranking, ObjectiveKind::SampledRecallAt1) => {
                return Err(NisError::config("sampled_recall_at_1 is a retrieval objective"))
            }
            _ => {}
        }
        if self.task.kind == TaskKind::Ranking && s.controller_batch % self.reward.auc_group != 0 {
            return Err(NisError::config("reward.auc_group must divide search.controller_batch"));
        }
        if self.oracle.max_candidates == 0 {
            return Err(NisError::config("oracle.max_candidates must be positive"));
        }
        self.layouts()?;
        Ok(())
    }

    /// Grid layout of every feature, in feature order.
    pub fn layouts(&self) -> Result<Vec<GridLayout>> {
        self.task
            .features
            .iter()
            .map(|f| {
                self.search
                    .grids
                    .get(&f.name)
                    .cloned()
                    .unwrap_or_default()
                    .layout(f.vocab)
                    .map_err(|e| NisError::config(format!("feature `{}`: {e}", f.name)))
            })
            .collect()
    }

    pub fn oracle_steps(&self) -> usize {
        self.oracle.steps.unwrap_or_else(|| self.search.main_steps())
    }

    /// The config with every defaulted value made explicit.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.search.warmup_steps = Some(c.search.warmup());
        c.oracle.steps = Some(c.oracle_steps());
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for (name, _) in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            assert_eq!(c.version, SCHEMA_VERSION);
        }
    }

    #[test]
    fn resolved_round_trips() {
        for (name, _) in PRESETS {
            let c = RunConfig::preset(name).unwrap().resolved();
            let text = c.to_toml();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), c, "{name}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let base = RunConfig::preset("toy_retrieval").unwrap().to_toml();
        let bad = base.replace("[search]", "[search]\nstpes = 3");
        assert!(matches!(RunConfig::from_toml(&bad), Err(NisError::Config(_))));
        let bad = format!("bogus = 1\n{base}");
        assert!(RunConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn version_is_checked() {
        let base = RunConfig::preset("toy_retrieval").unwrap().to_toml();
        let v2 = base.replace("version = 1", "version = 2");
        let err = RunConfig::from_toml(&v2).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        let none = base.replace("version = 1\n", "");
        assert!(RunConfig::from_toml(&none).is_err());
    }

    #[test]
    fn missing_file_is_an_io_error_naming_the_path() {
        let err = RunConfig::load("/nonexistent/run.toml").unwrap_err();
        assert!(matches!(err, NisError::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/run.toml"));
    }

    #[test]
    fn semantic_checks() {
        let mut c = RunConfig::preset("toy_ranking").unwrap();
        c.search.controller_batch = c.reward.auc_group + 1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::preset("toy_retrieval").unwrap();
        c.search.warmup_steps = Some(c.search.steps);
        assert!(c.validate().is_err());
        let mut c = RunConfig::preset("toy_retrieval").unwrap();
        c.reward.objective = ObjectiveKind::RocAuc;
        assert!(c.validate().is_err());
    }
}
