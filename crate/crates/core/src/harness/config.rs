use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ScenarioParams;
use crate::model::{BlockKind, ModelSpec};
use crate::runtime::{MappingMode, Overlap, SyncMode, TimingModel};
use crate::sap::TrainConfig;
use crate::scheduler::{CostModel, CostScale, DeviceProfile};
use crate::transport::{ChannelConfig, TimeoutPolicy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    CompGreedy,
    MinMax,
    VanillaEven,
    GalaxyTwoStep,
}

/// Calibration and training run in-process when no predictor file is given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SapSetup {
    pub prompts: usize,
    pub prompt_len: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for SapSetup {
    fn default() -> Self {
        Self {
            prompts: 60,
            prompt_len: 16,
            seed: 0,
            train: TrainConfig {
                epochs: 60,
                ..Default::default()
            },
        }
    }
}

/// Generated device sets used instead of a fixed device list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSet {
    #[serde(flatten)]
    pub params: ScenarioParams,
    pub count: usize,
    pub seed: u64,
}

impl Default for ScenarioSet {
    fn default() -> Self {
        Self {
            params: ScenarioParams::default(),
            count: 20,
            seed: 0,
        }
    }
}

/// Axes of the experiment matrix. An empty axis holds the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixAxes {
    /// Loss rate applied to every device except the master.
    pub plr: Vec<f64>,
    pub sync: Vec<SyncMode>,
    pub mapping: Vec<MappingMode>,
    pub scheduler: Vec<SchedulerKind>,
    pub overlap: Vec<Overlap>,
    /// Fields that turn a cell into its baseline cell for speedups.
    pub baseline: Option<BaselineSelector>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSelector {
    pub sync: Option<SyncMode>,
    pub mapping: Option<MappingMode>,
    pub scheduler: Option<SchedulerKind>,
    pub overlap: Option<Overlap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    /// HALM file to load instead of initialising `model`.
    pub model_path: Option<PathBuf>,
    /// HALP predictor file; otherwise `sap` trains one when needed.
    pub predictor_path: Option<PathBuf>,
    pub sap: Option<SapSetup>,
    pub devices: Vec<DeviceProfile>,
    pub scenario: Option<ScenarioSet>,
    /// Emulated model size; rescales memory per parameter.
    pub total_memory_mb: Option<f64>,
    /// Emulated compute: seconds per token on a device of compute 1.
    pub token_seconds: Option<f64>,
    pub scheduler: SchedulerKind,
    pub mapping: MappingMode,
    pub sync: SyncMode,
    pub overlap: Overlap,
    pub channel: ChannelConfig,
    pub policy: TimeoutPolicy,
    pub timing: TimingModel,
    pub cost_scale: CostScale,
    /// Fixed prompt; when empty each seed draws `prompt_len` tokens.
    pub prompt: Vec<u32>,
    pub prompt_len: usize,
    pub num_tokens: usize,
    pub seeds: Vec<u64>,
    /// Worker threads for independent runs; 0 uses every core.
    pub threads: usize,
    pub matrix: MatrixAxes,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            model_path: None,
            predictor_path: None,
            sap: None,
            devices: Vec::new(),
            scenario: None,
            total_memory_mb: None,
            token_seconds: None,
            scheduler: SchedulerKind::MinMax,
            mapping: MappingMode::Halo,
            sync: SyncMode::Relaxed,
            overlap: Overlap::BOTH,
            channel: ChannelConfig::default(),
            policy: TimeoutPolicy::default(),
            timing: TimingModel::default(),
            cost_scale: CostScale::default(),
            prompt: Vec::new(),
            prompt_len: 16,
            num_tokens: 16,
            seeds: vec![0],
            threads: 0,
            matrix: MatrixAxes::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parse `text` after applying `key.path=value` overrides, where the
    /// value is any TOML literal and bare words are taken as strings.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        for p in [&self.model_path, &self.predictor_path].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        match (&self.scenario, self.devices.is_empty()) {
            (Some(s), _) => s.params.validate()?,
            (None, true) => return Err(Error::Config("no devices and no scenario".into())),
            (None, false) => {
                for d in &self.devices {
                    d.validate()?;
                }
            }
        }
        if self.prompt.is_empty() && self.prompt_len == 0 {
            return Err(Error::Config("empty prompt".into()));
        }
        if self.matrix.plr.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("matrix plr outside [0, 1]".into()));
        }
        for v in [self.total_memory_mb, self.token_seconds].into_iter().flatten() {
            if !(v > 0.0) {
                return Err(Error::Config("emulation targets must be positive".into()));
            }
        }
        self.channel.validate()?;
        self.policy.validate()
    }

    /// SHA-256 of the canonical serialisation, ignoring the thread count
    /// (results do not depend on it).
    pub fn hash(&self) -> String {
        let canonical = Self {
            threads: 0,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    /// Cost scale after applying `total_memory_mb` to `spec`.
    pub fn effective_cost_scale(&self, spec: &ModelSpec) -> CostScale {
        let mut scale = self.cost_scale;
        if let Some(total) = self.total_memory_mb {
            let per_param = CostModel::from_spec(
                spec,
                CostScale {
                    mb_per_param: 1.0,
                    ..scale
                },
            )
            .total_memory();
            scale.mb_per_param = total / per_param;
        }
        scale
    }

    /// Timing model after applying `token_seconds` to `spec`.
    pub fn effective_timing(&self, spec: &ModelSpec) -> TimingModel {
        let mut timing = self.timing;
        if let Some(t) = self.token_seconds {
            timing.seconds_per_mac = t / token_macs(spec) as f64;
        }
        timing
    }
}

/// Group MACs of one full token.
pub fn token_macs(spec: &ModelSpec) -> usize {
    spec.num_layers
        * (spec.num_heads * spec.group_macs(BlockKind::Mha)
            + spec.mlp_groups * spec.group_macs(BlockKind::Mlp))
        + spec.vocab_groups * spec.group_macs(BlockKind::LmHead)
}

fn apply_override(doc: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
