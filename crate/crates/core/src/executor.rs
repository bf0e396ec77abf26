//! Hierarchical closed-loop execution: the action model proposes chunks,
//! and the per-step trigger decides whether the hand follows the chunk or
//! the rotation copilot.

use dexmode_autodiff::{ParamStore, Session, Tensor};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{ObsBatch, Observation};
use crate::bench::TaskEnv;
use crate::data::NormStats;
use crate::error::{contract, Error, Result};
use crate::flow::{euler_sample, ActionChunk, ActionLayout};
use crate::imcopilot::Copilot;
use crate::model::{Variant, VlaModel};
use crate::record::{EpisodeRecord, Outcome, Source, StepRow};

pub use crate::imcopilot::rotor::integrate_targets as integrate_joint_targets;

pub const TRIGGER_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DispatchOption {
    /// Hand follows the action model.
    Option1,
    /// Hand follows the copilot.
    Option2,
}

pub fn select_option(c: f64, copilot_loaded: bool) -> DispatchOption {
    if c > TRIGGER_THRESHOLD {
        if copilot_loaded {
            return DispatchOption::Option2;
        }
        log::warn!("trigger {c:.3} requests the copilot but none is loaded; the hand stays with the action model");
    }
    DispatchOption::Option1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutorConfig {
    /// Steps of each chunk executed before the next inference.
    pub replan: usize,
    /// Step cap on top of the environment's own limit.
    pub max_steps: Option<usize>,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            replan: 4,
            max_steps: None,
        }
    }
}

impl ExecutorConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.replan == 0 || self.replan > horizon {
            return contract(format!("replanning interval {} outside 1..={horizon}", self.replan));
        }
        Ok(())
    }
}

/// Anything that proposes action chunks from observations.
pub trait ChunkPolicy {
    fn horizon(&self) -> usize;
    fn layout(&self) -> &ActionLayout;
    fn chunk(&mut self, obs: &Observation, step: usize, rng: &mut dyn RngCore) -> Result<ActionChunk>;
}

/// Expert choices of the modal tokens seen during inference.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTally {
    pub counts: Vec<usize>,
    pub tokens: usize,
    /// Tokens that did not land on exactly one in-range expert.
    pub violations: usize,
}

impl RoutingTally {
    pub fn utilization(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.tokens.max(1) as f64).collect()
    }

    pub fn max_utilization(&self) -> f64 {
        self.utilization().into_iter().fold(0.0, f64::max)
    }
}

/// A trained action model with its normalization and ablation variant.
#[derive(Clone)]
pub struct VlaPolicy {
    pub model: VlaModel,
    pub store: ParamStore<f32>,
    pub norm: NormStats,
    pub variant: Variant,
    pub routing: RoutingTally,
}

impl VlaPolicy {
    pub fn new(model: VlaModel, store: ParamStore<f32>, norm: NormStats, variant: Variant) -> Self {
        let experts = model.mode.as_ref().map_or(0, |m| m.experts.len());
        Self {
            model,
            store,
            norm,
            variant,
            routing: RoutingTally {
                counts: vec![0; experts],
                ..Default::default()
            },
        }
    }

    /// Observation as seen by this variant: normalized, with ablated
    /// modalities zeroed.
    pub fn prepare(&self, obs: &Observation) -> Observation {
        prepare_obs(&self.norm, self.variant, obs)
    }
}

pub fn prepare_obs(norm: &NormStats, variant: Variant, obs: &Observation) -> Observation {
    let mut o = norm.normalize_obs(obs);
    if !variant.uses_force() {
        o.force.iter_mut().for_each(|v| *v = 0.0);
    }
    if !variant.uses_tactile() {
        o.tactile.iter_mut().for_each(|v| *v = 0.0);
    }
    o
}

impl ChunkPolicy for VlaPolicy {
    fn horizon(&self) -> usize {
        self.model.cfg.horizon
    }

    fn layout(&self) -> &ActionLayout {
        &self.model.dims.layout
    }

    fn chunk(&mut self, obs: &Observation, _step: usize, rng: &mut dyn RngCore) -> Result<ActionChunk> {
        let (h, d_a) = (self.model.cfg.horizon, self.model.dims.d_a());
        let batch = ObsBatch::from_obs([&self.prepare(obs)]);
        let noise: Vec<f64> = (0..h * d_a).map(|_| StandardNormal.sample(rng)).collect();
        let s = Session::inference(&self.store);
        let prefix = self.model.prefix(&s, &batch)?;
        let (model, tally) = (&self.model, &mut self.routing);
        let x = euler_sample(
            |x, t| {
                let xv = s.constant(Tensor::from_f64(vec![1, h, d_a], x)?);
                let out = model.velocity_with_prefix(&s, &batch, prefix, xv, &[t])?;
                if let Some(f) = &out.fusion {
                    let e = tally.counts.len();
                    for r in f.force_routes.iter().chain(&f.tactile_routes) {
                        tally.tokens += 1;
                        match tally.counts.get_mut(r.expert) {
                            Some(c) if r.probs.len() == e => *c += 1,
                            _ => tally.violations += 1,
                        }
                    }
                }
                Ok(s.value(out.v).to_f64())
            },
            noise,
            self.model.cfg.euler_steps,
        )?;
        let mut a = self.norm.action.denormalize(&x);
        let trig = self.model.dims.layout.trigger();
        for row in a.chunks_mut(d_a) {
            row[trig] = if self.variant.uses_copilot() { row[trig].clamp(0.0, 1.0) } else { 0.0 };
        }
        ActionChunk::new(h, d_a, a)
    }
}

/// Replays the actions of a recorded episode, chunk by chunk.
pub struct ReplayPolicy {
    pub actions: Vec<Vec<f64>>,
    pub horizon: usize,
    pub layout: ActionLayout,
}

impl ChunkPolicy for ReplayPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn layout(&self) -> &ActionLayout {
        &self.layout
    }

    fn chunk(&mut self, _obs: &Observation, step: usize, _rng: &mut dyn RngCore) -> Result<ActionChunk> {
        let d = self.layout.dim();
        let mut data = Vec::with_capacity(self.horizon * d);
        for i in 0..self.horizon {
            let idx = (step + i).min(self.actions.len().saturating_sub(1));
            match self.actions.get(idx) {
                Some(a) => data.extend_from_slice(a),
                None => data.extend(std::iter::repeat(0.0).take(d)),
            }
        }
        ActionChunk::new(self.horizon, d, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub record: EpisodeRecord,
    /// Step index at which each inference happened.
    pub inferences: Vec<usize>,
    /// The episode was cut short by a non-finite chunk.
    pub aborted: bool,
}

impl Rollout {
    pub fn dispatch_violations(&self, copilot_loaded: bool) -> usize {
        self.record
            .rows
            .iter()
            .filter(|r| (r.source == Source::Copilot) != (r.trigger > TRIGGER_THRESHOLD && copilot_loaded))
            .count()
    }
}

pub fn rollout(
    env: &mut dyn TaskEnv,
    policy: &mut dyn ChunkPolicy,
    copilot: Option<&Copilot>,
    cfg: &ExecutorConfig,
    rng: &mut dyn RngCore,
) -> Result<Rollout> {
    cfg.validate(policy.horizon())?;
    let layout = policy.layout().clone();
    let trig = layout.trigger();
    let cap = cfg.max_steps.unwrap_or(usize::MAX).min(env.max_steps());
    let loaded = copilot.is_some() && env.copilot_history().is_some();
    let mut rows = Vec::new();
    let mut inferences = Vec::new();
    let mut aborted = false;
    'episode: while !env.done() && env.steps() < cap {
        let obs = env.observe();
        inferences.push(env.steps());
        let chunk = match policy.chunk(&obs, env.steps(), rng) {
            Ok(c) if c.data.iter().all(|v| v.is_finite()) => c,
            Ok(_) | Err(Error::NonFinite(_)) => {
                aborted = true;
                break 'episode;
            }
            Err(e) => return Err(e),
        };
        for i in 0..cfg.replan {
            if env.done() || env.steps() >= cap {
                break 'episode;
            }
            let obs = if i == 0 { obs.clone() } else { env.observe() };
            let mut action = chunk.row(i).to_vec();
            let c = action[trig].clamp(0.0, 1.0);
            action[trig] = c;
            let source = match (select_option(c, loaded), copilot, env.copilot_history()) {
                (DispatchOption::Option2, Some(cp), Some(hist)) => {
                    let hand = cp.act(hist)?;
                    action[layout.hand.clone()].copy_from_slice(&hand);
                    Source::Copilot
                }
                _ => Source::Vla,
            };
            let step = env.steps();
            rows.push(StepRow {
                vision: obs.vision,
                proprio: obs.proprio,
                force: obs.force,
                tactile: obs.tactile,
                action: action.clone(),
                trigger: c,
                source,
            });
            env.step(&action).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} (executor step {step})")),
                other => other,
            })?;
        }
    }
    let outcome = if aborted {
        Outcome {
            success: false,
            ..env.outcome()
        }
    } else {
        env.outcome()
    };
    Ok(Rollout {
        record: EpisodeRecord {
            episode_id: 0,
            instruction: env.task().instruction(),
            domain_seed: 0,
            rows,
            outcome,
        },
        inferences,
        aborted,
    })
}
