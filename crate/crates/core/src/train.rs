//! Flow-matching training of the action model on demonstrations. Every step
//! draws its minibatch from a stream keyed by `(seed, step)`, so a run
//! resumed from a checkpoint continues exactly where it stopped.

use dexmode_autodiff::{AdamWConfig, Checkpoint, OptimizerState, ParamStore, Session};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, ModelDims, ObsBatch, Observation};
use crate::data::{compute_norm_stats, NormStats};
use crate::error::{contract, Error, Result};
use crate::executor::{prepare_obs, VlaPolicy};
use crate::flow::sample_timestep;
use crate::fusion::routing_entropy;
use crate::model::{Variant, VlaModel};
use crate::record::EpisodeRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 32,
            lr: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
            checkpoint_every: 500,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || !(self.lr > 0.0) || self.log_every == 0 {
            return Err(Error::Config("training steps, batch, lr and log interval must be positive".into()));
        }
        Ok(())
    }
}

/// Training view of a dataset: prepared observations and normalized target
/// chunks, one per recorded step.
pub struct Samples {
    obs: Vec<Observation>,
    chunks: Vec<Vec<f64>>,
}

impl Samples {
    pub fn new(records: &[EpisodeRecord], norm: &NormStats, variant: Variant, horizon: usize) -> Result<Self> {
        let mut obs = Vec::new();
        let mut chunks = Vec::new();
        for ep in records {
            let actions: Vec<Vec<f64>> = ep.rows.iter().map(|r| norm.action.normalize(&r.action)).collect();
            for (t, row) in ep.rows.iter().enumerate() {
                obs.push(prepare_obs(norm, variant, &row.observation(ep.instruction)));
                let mut c = Vec::with_capacity(horizon * actions[t].len());
                for k in 0..horizon {
                    // Past the end the last action is held.
                    c.extend_from_slice(&actions[(t + k).min(actions.len() - 1)]);
                }
                chunks.push(c);
            }
        }
        if obs.is_empty() {
            return contract("training set has no steps");
        }
        Ok(Self { obs, chunks })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
}

pub struct VlaTrainer {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub variant: Variant,
    pub policy: VlaPolicy,
    pub opt: OptimizerState<f32>,
    samples: Samples,
}

fn build_model(model_cfg: &ModelConfig, dims: &ModelDims, variant: Variant, seed: u64) -> Result<(VlaModel, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = VlaModel::new(&mut store, model_cfg, dims, variant.uses_fusion(), &mut rng)?;
    Ok((model, store))
}

impl VlaTrainer {
    pub fn new(
        model_cfg: &ModelConfig,
        dims: &ModelDims,
        variant: Variant,
        cfg: &TrainConfig,
        records: &[EpisodeRecord],
    ) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        let norm = compute_norm_stats(records)?;
        let (model, store) = build_model(model_cfg, dims, variant, cfg.seed)?;
        let samples = Samples::new(records, &norm, variant, model_cfg.horizon)?;
        let opt = OptimizerState::new(
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                horizon: cfg.steps,
                ..AdamWConfig::default()
            },
            &store,
        );
        Ok(Self {
            model_cfg: model_cfg.clone(),
            cfg: cfg.clone(),
            variant,
            policy: VlaPolicy::new(model, store, norm, variant),
            opt,
            samples,
        })
    }

    pub fn step(&self) -> usize {
        self.opt.step
    }

    pub fn done(&self) -> bool {
        self.step() >= self.cfg.steps
    }

    fn batch(&self, rng: &mut ChaCha8Rng) -> (ObsBatch, Vec<f64>, Vec<f64>, Vec<f64>) {
        let idx: Vec<usize> = (0..self.cfg.batch).map(|_| rng.gen_range(0..self.samples.len())).collect();
        let obs = ObsBatch::from_obs(idx.iter().map(|&i| &self.samples.obs[i]));
        let x0: Vec<f64> = idx.iter().flat_map(|&i| self.samples.chunks[i].iter().copied()).collect();
        let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let t: Vec<f64> = (0..idx.len()).map(|_| sample_timestep(rng)).collect();
        (obs, x0, eps, t)
    }

    /// One optimizer step; returns the loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64);
        let (obs, x0, eps, t) = self.batch(&mut rng);
        let p = &self.policy;
        let (loss, grads) = {
            let s = Session::new(&p.store);
            let (l, _) = p.model.loss(&s, &obs, &x0, &eps, &t)?;
            (s.item(l) as f64, s.grads(l)?)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        self.opt.step(&mut self.policy.store, &grads)?;
        Ok(loss)
    }

    /// Trains up to `until` steps (capped at the configured total), calling
    /// `log` every `log_every` steps with the mean loss since the last row.
    pub fn run(&mut self, until: usize, mut log: impl FnMut(&LossRow)) -> Result<()> {
        let until = until.min(self.cfg.steps);
        let mut acc = 0.0;
        let mut n = 0usize;
        while self.step() < until {
            acc += self.train_step()?;
            n += 1;
            if self.step() % self.cfg.log_every == 0 || self.step() == self.cfg.steps {
                log(&LossRow { step: self.step(), loss: acc / n as f64 });
                acc = 0.0;
                n = 0;
            }
        }
        Ok(())
    }

    /// Parameters, optimizer moments and everything needed to rebuild the
    /// trainer from the same dataset.
    pub fn to_checkpoint(&self) -> Result<Checkpoint<f32>> {
        let meta = serde_json::json!({
            "kind": "vla",
            "variant": self.variant,
            "step": self.step(),
            "model": self.model_cfg,
            "dims": self.policy.model.dims,
            "train": self.cfg,
            "norm": self.policy.norm,
        });
        let mut ck = Checkpoint::new(meta);
        for (name, t) in self.policy.store.named() {
            ck.push(name, t.clone());
        }
        for (name, t) in self.opt.export(&self.policy.store) {
            ck.push(name, t);
        }
        Ok(ck)
    }

    pub fn resume(ck: &Checkpoint<f32>, records: &[EpisodeRecord]) -> Result<Self> {
        let meta = CheckpointMeta::parse(ck)?;
        let mut tr = Self::new(&meta.model, &meta.dims, meta.variant, &meta.train, records)?;
        if tr.policy.norm != meta.norm {
            return contract("checkpoint was trained on a different dataset");
        }
        tr.policy.store.load_named(ck.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        tr.opt.import(&tr.policy.store, |n| ck.get(n).cloned(), meta.step)?;
        Ok(tr)
    }
}

#[derive(Deserialize)]
struct CheckpointMeta {
    variant: Variant,
    step: usize,
    model: ModelConfig,
    dims: ModelDims,
    train: TrainConfig,
    norm: NormStats,
}

impl CheckpointMeta {
    fn parse(ck: &Checkpoint<f32>) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("vla") {
            return contract("checkpoint is not an action-model checkpoint");
        }
        Ok(serde_json::from_value(ck.meta.clone())?)
    }
}

/// Rebuilds an inference policy from a checkpoint.
pub fn load_policy(ck: &Checkpoint<f32>) -> Result<VlaPolicy> {
    let meta = CheckpointMeta::parse(ck)?;
    let (model, mut store) = build_model(&meta.model, &meta.dims, meta.variant, meta.train.seed)?;
    store.load_named(ck.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(VlaPolicy::new(model, store, meta.norm, meta.variant))
}

/// Expert usage over the modal tokens of `batches` random training-style
/// batches drawn from `records`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub utilization: Vec<f64>,
    pub entropy: f64,
    pub tokens: usize,
    /// Tokens that did not route to exactly one in-range expert.
    pub violations: usize,
}

pub fn routing_report(policy: &VlaPolicy, records: &[EpisodeRecord], batches: usize, batch: usize, seed: u64) -> Result<RoutingReport> {
    let Some(mode) = policy.model.mode.as_ref() else {
        return contract("routing report needs a model with the fusion block");
    };
    let e = mode.experts.len();
    let samples = Samples::new(records, &policy.norm, policy.variant, policy.model.cfg.horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; e];
    let mut tokens = 0;
    let mut violations = 0;
    let mut all_routes = Vec::new();
    for _ in 0..batches {
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..samples.len())).collect();
        let obs = ObsBatch::from_obs(idx.iter().map(|&i| &samples.obs[i]));
        let x0: Vec<f64> = idx.iter().flat_map(|&i| samples.chunks[i].iter().copied()).collect();
        let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let t: Vec<f64> = (0..batch).map(|_| sample_timestep(&mut rng)).collect();
        let s = Session::inference(&policy.store);
        let (_, out) = policy.model.loss(&s, &obs, &x0, &eps, &t)?;
        let fusion = out.fusion.expect("fusion model");
        for r in fusion.force_routes.iter().chain(&fusion.tactile_routes) {
            tokens += 1;
            if r.expert >= e || r.probs.len() != e {
                violations += 1;
            } else {
                counts[r.expert] += 1;
            }
        }
        all_routes.extend(fusion.force_routes.into_iter().chain(fusion.tactile_routes));
    }
    let refs: Vec<_> = all_routes.iter().collect();
    Ok(RoutingReport {
        utilization: counts.iter().map(|&c| c as f64 / tokens.max(1) as f64).collect(),
        entropy: routing_entropy(&refs, e),
        tokens,
        violations,
    })
}
