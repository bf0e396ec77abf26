//! Surrogate contact-rich tasks, scripted demonstrators and metrics.

pub mod insertion;
pub mod demo;
pub mod peel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::backbone::{ModelDims, Observation};
use crate::error::{contract, Error, Result};
use crate::imcopilot::ObsHistory;
use crate::record::{EpisodeRecord, Outcome};

pub use insertion::{InsertionConfig, InsertionEnv};
pub use peel::{ArcSet, PeelConfig, PeelEnv};

pub const FORCE_DIM: usize = 14;
pub const TACTILE_DIM: usize = 60;

/// Shared instruction vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Insertion,
    Peel,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Insertion, Task::Peel];

    pub fn name(self) -> &'static str {
        match self {
            Task::Insertion => "insertion",
            Task::Peel => "peel",
        }
    }

    pub fn instruction(self) -> usize {
        self as usize
    }

    pub fn dims(self) -> ModelDims {
        match self {
            Task::Insertion => insertion::dims(),
            Task::Peel => peel::dims(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Closed-loop environment interface used by the executor.
pub trait TaskEnv {
    fn task(&self) -> Task;
    fn observe(&self) -> Observation;
    /// Applies one full action vector `[arm | hand | other]`.
    fn step(&mut self, action: &[f64]) -> Result<()>;
    fn done(&self) -> bool;
    fn outcome(&self) -> Outcome;
    fn steps(&self) -> usize;
    fn max_steps(&self) -> usize;
    /// Observation history for the rotation copilot, if the task has a hand
    /// it can drive.
    fn copilot_history(&self) -> Option<&ObsHistory> {
        None
    }
}

/// Fraction of successful trials.
pub fn compute_sr(outcomes: &[bool]) -> Result<f64> {
    if outcomes.is_empty() {
        return contract("success rate of an empty outcome list");
    }
    Ok(outcomes.iter().filter(|&&s| s).count() as f64 / outcomes.len() as f64)
}

/// Peel completion ratio floored to quarter rings.
pub fn compute_pcr(fraction: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fraction) {
        return contract(format!("peeled fraction {fraction} outside [0, 1]"));
    }
    Ok(((fraction * 4.0).floor() / 4.0).min(1.0))
}

pub fn record_sr(records: &[EpisodeRecord]) -> Result<f64> {
    compute_sr(&records.iter().map(|r| r.outcome.success).collect::<Vec<_>>())
}

pub fn record_pcr(records: &[EpisodeRecord]) -> Result<f64> {
    if records.is_empty() {
        return contract("completion ratio of an empty record list");
    }
    let mut total = 0.0;
    for r in records {
        total += compute_pcr(r.outcome.peeled.unwrap_or(0.0))?;
    }
    Ok(total / records.len() as f64)
}

/// Fixed sensor mixing matrix `[rows, cols]`, identical across runs.
pub(crate) fn mixing(rows: usize, cols: usize, tag: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e45_0000 + tag);
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * scale * 1.7).collect()
}

pub(crate) fn mix(m: &[f64], x: &[f64]) -> Vec<f64> {
    m.chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}
