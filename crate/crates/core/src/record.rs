//! Episode records shared by demonstrators, the executor and the dataset.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::backbone::Observation;
use crate::error::{Error, Result};

/// Who produced the hand command of a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Vla,
    Copilot,
    /// Scripted demonstrator.
    Expert,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Vla => "vla",
            Source::Copilot => "copilot",
            Source::Expert => "expert",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Source::Vla, Source::Copilot, Source::Expert]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown source {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub vision: Vec<f64>,
    pub proprio: Vec<f64>,
    pub force: Vec<f64>,
    pub tactile: Vec<f64>,
    /// Executed action `[arm | hand | other]`; the trigger is the last entry.
    pub action: Vec<f64>,
    pub trigger: f64,
    pub source: Source,
}

impl StepRow {
    pub fn observation(&self, instruction: usize) -> Observation {
        Observation {
            vision: self.vision.clone(),
            instruction,
            proprio: self.proprio.clone(),
            force: self.force.clone(),
            tactile: self.tactile.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    /// Raw peeled fraction for the peel task.
    pub peeled: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub instruction: usize,
    pub domain_seed: u64,
    pub rows: Vec<StepRow>,
    pub outcome: Outcome,
}
