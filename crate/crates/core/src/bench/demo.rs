//! Scripted demonstrators. They act with privileged state, the way a human
//! operator would act with full view of the scene, and their episodes are
//! success-filtered before training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::insertion::{InsertionConfig, InsertionEnv};
use super::peel::{PeelConfig, PeelEnv, ACTION_DIM as PEEL_ACTIONS};
use super::{compute_pcr, Task, TaskEnv};
use crate::error::{Error, Result};
use crate::imcopilot::rotor::JOINTS;
use crate::imcopilot::{scripted_rotation, Copilot};
use crate::record::{EpisodeRecord, Source, StepRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertionController {
    Expert,
    ForceAware,
    VisionOnly,
}

/// How the peel demonstrator turns the apple between strokes.
#[derive(Clone, Copy, Debug)]
pub enum Rotation<'a> {
    Copilot(&'a Copilot),
    /// Constant roller command, labelled as ordinary hand actions.
    Scripted,
}

fn push_row(rows: &mut Vec<StepRow>, env: &dyn TaskEnv, action: &[f64], source: Source) {
    let o = env.observe();
    rows.push(StepRow {
        vision: o.vision,
        proprio: o.proprio,
        force: o.force,
        tactile: o.tactile,
        action: action.to_vec(),
        trigger: *action.last().expect("non-empty action"),
        source,
    });
}

/// Runs one insertion episode. With `noise > 0` the executed arm command is
/// perturbed while the recorded label stays the controller's own action, so
/// demonstrations also show how to recover from small errors.
pub fn insertion_episode(cfg: &InsertionConfig, seed: u64, controller: InsertionController, noise: f64) -> Result<EpisodeRecord> {
    let mut env = InsertionEnv::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1CE);
    let mut rows = Vec::new();
    while !env.done() {
        let a = match controller {
            InsertionController::Expert => env.expert_action(),
            InsertionController::ForceAware => env.force_aware_action(),
            InsertionController::VisionOnly => env.vision_only_action(),
        };
        push_row(&mut rows, &env, &a, Source::Expert);
        let mut executed = a;
        if noise > 0.0 {
            for v in &mut executed[..2] {
                *v += noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        env.step(&executed)?;
    }
    Ok(EpisodeRecord {
        episode_id: 0,
        instruction: Task::Insertion.instruction(),
        domain_seed: seed,
        rows,
        outcome: env.outcome(),
    })
}

pub fn peel_episode(cfg: &PeelConfig, seed: u64, rotation: Rotation<'_>) -> Result<EpisodeRecord> {
    let mut env = PeelEnv::new(cfg.clone(), seed)?;
    let mut rows = Vec::new();
    while !env.done() {
        let mut a = env.expert_action();
        let trig = PEEL_ACTIONS - 1;
        let mut source = Source::Expert;
        if a[trig] > 0.5 {
            let hand = match rotation {
                Rotation::Copilot(c) => {
                    source = Source::Copilot;
                    c.act(&env.history)?
                }
                Rotation::Scripted => {
                    a[trig] = 0.0;
                    scripted_rotation(1.0)
                }
            };
            a[2..2 + JOINTS].copy_from_slice(&hand);
        }
        push_row(&mut rows, &env, &a, source);
        env.step(&a)?;
    }
    Ok(EpisodeRecord {
        episode_id: 0,
        instruction: Task::Peel.instruction(),
        domain_seed: seed,
        rows,
        outcome: env.outcome(),
    })
}

/// Acceptance rule for demonstrations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoFilter {
    /// Insertion: require success. Peel: minimum completion ratio.
    pub min_pcr: f64,
    /// Give up when the demonstrator fails more often than this.
    pub max_failure_rate: f64,
}

impl Default for DemoFilter {
    fn default() -> Self {
        Self {
            min_pcr: 1.0,
            max_failure_rate: 0.5,
        }
    }
}

impl DemoFilter {
    pub fn accepts(&self, r: &EpisodeRecord) -> Result<bool> {
        Ok(match r.outcome.peeled {
            Some(f) => compute_pcr(f)? >= self.min_pcr,
            None => r.outcome.success,
        })
    }
}

/// Generates `count` accepted demonstrations with consecutive ids starting at
/// `first_id`. Domain seeds are drawn from `rng`, so a fixed seed gives a
/// fixed dataset.
pub fn collect_demos<R: Rng + ?Sized>(
    count: usize,
    first_id: u64,
    filter: &DemoFilter,
    rng: &mut R,
    mut episode: impl FnMut(u64) -> Result<EpisodeRecord>,
) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::with_capacity(count);
    let mut tried = 0usize;
    while out.len() < count {
        let seed = rng.gen::<u64>();
        let mut rec = episode(seed)?;
        tried += 1;
        if filter.accepts(&rec)? {
            rec.episode_id = first_id + out.len() as u64;
            out.push(rec);
        }
        let failed = tried - out.len();
        if tried >= 20 && failed as f64 > filter.max_failure_rate * tried as f64 {
            return Err(Error::Calibration(format!(
                "demonstrator failed {failed} of {tried} episodes; the task is too hard for it"
            )));
        }
    }
    Ok(out)
}
