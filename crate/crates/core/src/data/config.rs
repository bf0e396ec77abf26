//! Run configuration, read from TOML. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::bench::demo::DemoFilter;
use crate::bench::{InsertionConfig, PeelConfig, Task};
use crate::error::{Error, Result};
use crate::executor::ExecutorConfig;
use crate::imcopilot::{DistillConfig, PpoConfig, RandomizationRanges, RotorConfig};
use crate::model::Variant;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub insertion: InsertionConfig,
    pub peel: PeelConfig,
}

/// Which inputs and skills a run uses. Only the five grid variants are valid
/// combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub fusion: bool,
    pub force: bool,
    pub tactile: bool,
    pub copilot: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::of(Variant::Full)
    }
}

impl AblationFlags {
    pub fn of(v: Variant) -> Self {
        Self {
            fusion: v.uses_fusion(),
            force: v.uses_force(),
            tactile: v.uses_tactile(),
            copilot: v.uses_copilot(),
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| Self::of(*v) == *self)
            .ok_or_else(|| Error::Config(format!("ablation flags {self:?} match no variant")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopilotConfig {
    pub seed: u64,
    pub ppo: PpoConfig,
    pub distill: DistillConfig,
    pub rotor: RotorConfig,
    pub ranges: RandomizationRanges,
}

impl Default for CopilotConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ppo: PpoConfig::default(),
            distill: DistillConfig::default(),
            rotor: RotorConfig::default(),
            ranges: RandomizationRanges::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub count: usize,
    pub seed: u64,
    /// Std of the perturbation applied to executed insertion commands; the
    /// recorded labels stay clean.
    pub noise: f64,
    pub filter: DemoFilter,
    /// Filter for the scripted-rotation peel demos of the no-copilot variant.
    pub relaxed_filter: DemoFilter,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            count: 200,
            seed: 0,
            noise: 0.3,
            filter: DemoFilter::default(),
            relaxed_filter: DemoFilter {
                min_pcr: 0.25,
                max_failure_rate: 0.8,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub executor: ExecutorConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            seeds: vec![0, 1, 2],
            executor: ExecutorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub copilot: CopilotConfig,
    #[serde(default)]
    pub demos: DemoConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            env: EnvConfig::default(),
            ablation: AblationFlags::default(),
            copilot: CopilotConfig::default(),
            demos: DemoConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::load_with_flags(path)?.0)
    }

    /// Also reports whether the file sets ablation flags itself, so a
    /// command-line variant can be checked against them.
    pub fn load_with_flags(path: impl AsRef<Path>) -> Result<(Self, bool)> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_toml(&text)?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        Ok((cfg, table.contains_key("ablation")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.env.insertion.validate()?;
        self.env.peel.validate()?;
        self.copilot.rotor.validate()?;
        self.copilot.ranges.validate()?;
        self.eval.executor.validate(self.model.horizon)?;
        self.ablation.variant()?;
        Ok(())
    }

    /// Applies a requested variant. A config whose explicit flags say
    /// otherwise is rejected rather than silently overridden.
    pub fn with_variant(mut self, v: Variant, flags_explicit: bool) -> Result<Self> {
        let want = AblationFlags::of(v);
        if flags_explicit && self.ablation != want {
            return Err(Error::Config(format!(
                "variant {v} contradicts the configured ablation flags {:?}",
                self.ablation
            )));
        }
        self.ablation = want;
        Ok(self)
    }
}
