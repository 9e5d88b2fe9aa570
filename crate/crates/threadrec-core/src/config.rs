//! Run configuration: a sectioned key-value file (TOML) with a default for
//! every field, strict unknown-key rejection, and dotted-path overrides so
//! command-line flags and environment variables can patch individual keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocator::{AgentConfig, TimeDecay};
use crate::data::synthetic::SyntheticSpec;
use crate::error::{Error, Result};
use crate::rewards::RewardConfig;
use crate::training::{PrefixMode, TrainConfig};

/// Environment variables `THREADREC_<SECTION>__<KEY>` override config keys.
pub const ENV_PREFIX: &str = "THREADREC_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker-thread cap for parallel sections; 0 means one per core.
    pub threads: usize,
    pub data: DataSection,
    pub synthetic: SyntheticSpec,
    pub model: ModelSection,
    pub agent: AgentSection,
    pub rewards: RewardSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            threads: 0,
            data: DataSection::default(),
            synthetic: SyntheticSpec::default(),
            model: ModelSection::default(),
            agent: AgentSection::default(),
            rewards: RewardSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub delimiter: char,
    pub min_length: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            delimiter: '\t',
            min_length: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embedding_dim: usize,
    pub precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embedding_dim: 64,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    Linear,
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSection {
    /// Threshold logit for opening a new thread.
    pub epsilon: f64,
    pub temperature: f64,
    pub time_decay: DecayKind,
    /// Rate of the exponential decay.
    pub decay_rate: f64,
    /// Slope of the linear decay.
    pub decay_slope: f64,
    /// Offset of the linear decay.
    pub decay_offset: f64,
    pub time_decay_enabled: bool,
}

impl Default for AgentSection {
    fn default() -> Self {
        AgentSection {
            epsilon: 0.3,
            temperature: 1.0,
            time_decay: DecayKind::Exponential,
            decay_rate: 1.0,
            decay_slope: 1.0,
            decay_offset: 1.0,
            time_decay_enabled: true,
        }
    }
}

impl AgentSection {
    pub fn to_agent_config(&self) -> AgentConfig {
        AgentConfig {
            epsilon: self.epsilon,
            temperature: self.temperature,
            decay: match self.time_decay {
                DecayKind::Exponential => TimeDecay::Exponential {
                    rate: self.decay_rate,
                },
                DecayKind::Linear => TimeDecay::Linear {
                    slope: self.decay_slope,
                    offset: self.decay_offset,
                },
            },
            decay_enabled: self.time_decay_enabled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub gamma: f64,
    pub curriculum_slope: f64,
    pub curriculum_offset: f64,
    pub fit: bool,
    pub coherence: bool,
    pub orthogonality: bool,
    pub new_thread: bool,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            gamma: 0.95,
            curriculum_slope: -0.1,
            curriculum_offset: 0.3,
            fit: true,
            coherence: true,
            orthogonality: true,
            new_thread: true,
        }
    }
}

impl RewardSection {
    pub fn to_reward_config(&self) -> RewardConfig {
        RewardConfig {
            gamma: self.gamma,
            curriculum_slope: self.curriculum_slope,
            curriculum_offset: self.curriculum_offset,
            fit: self.fit,
            coherence: self.coherence,
            orthogonality: self.orthogonality,
            new_thread: self.new_thread,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub negatives: usize,
    pub learning_rate: f64,
    pub prefix_mode: PrefixMode,
    pub baseline_ema: bool,
    pub ema_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            alpha: 0.5,
            batch_size: 256,
            epochs: 100,
            negatives: 4,
            learning_rate: 0.005,
            prefix_mode: PrefixMode::Last,
            baseline_ema: true,
            ema_decay: 0.9,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            batch_size: self.batch_size,
            negatives: self.negatives,
            learning_rate: self.learning_rate,
            prefix_mode: self.prefix_mode,
            baseline_ema: self.baseline_ema,
            ema_decay: self.ema_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub top_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { top_k: 5 }
    }
}

impl RunConfig {
    /// Parse a TOML file, then apply overrides (later wins).
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for (key, raw) in env_overrides() {
            set_path(&mut table, &key, &raw)?;
        }
        for (key, raw) in overrides {
            set_path(&mut table, key, raw)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Defaults patched by overrides only; used when no file is given.
    pub fn from_overrides(overrides: &[(String, String)]) -> Result<Self> {
        let text = toml::to_string(&RunConfig::default())
            .map_err(|e| Error::Config(format!("serialize defaults: {e}")))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.to_agent_config().validate()?;
        self.rewards.to_reward_config().validate()?;
        self.train.to_train_config().validate()?;
        if self.eval.top_k == 0 {
            return Err(Error::Config("eval.top_k must be positive".into()));
        }
        if self.data.min_length < 3 {
            return Err(Error::Config("data.min_length must be at least 3".into()));
        }
        Ok(())
    }
}

/// Serialize any config section to TOML (provenance files).
pub fn section_to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Config(format!("serialize: {e}")))
}

/// `THREADREC_TRAIN__LEARNING_RATE=0.01` patches `train.learning_rate`.
fn env_overrides() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

/// Set `a.b.c` inside a TOML table, parsing `raw` as a TOML literal (falling
/// back to a string).
fn set_path(root: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let literal: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path:?} does not address a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), literal);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_identity() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let parsed = RunConfig::parse(&text, &[]).unwrap();
        assert_eq!(cfg, parsed);
        // Second round trip is byte-stable.
        assert_eq!(text, parsed.to_toml().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("[train]\nlr_typo = 0.1\n", &[]);
        assert!(err.is_err());
    }

    #[test]
    fn overrides_apply_with_types() {
        let cfg = RunConfig::from_overrides(&[
            ("train.learning_rate".into(), "0.01".into()),
            ("agent.time_decay".into(), "\"linear\"".into()),
            ("rewards.new_thread".into(), "false".into()),
            ("model.embedding_dim".into(), "16".into()),
        ])
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.agent.time_decay, DecayKind::Linear);
        assert!(!cfg.rewards.new_thread);
        assert_eq!(cfg.model.embedding_dim, 16);
    }

    #[test]
    fn bare_strings_work_as_overrides() {
        let cfg = RunConfig::from_overrides(&[("agent.time_decay".into(), "linear".into())]).unwrap();
        assert_eq!(cfg.agent.time_decay, DecayKind::Linear);
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }
}
