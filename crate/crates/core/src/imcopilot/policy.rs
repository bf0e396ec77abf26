//! Copilot networks: privileged encoder, actor and critic for the teacher,
//! and a student encoder that recovers the teacher latent from observations.

use dexmode_autodiff::{Checkpoint, ParamId, ParamStore, Session, Tensor, Var};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::rotor::{ObsHistory, FRAME, JOINTS, PRIVILEGED};
use crate::error::{contract, Error, Result};
use crate::nn::{Activation, Init, Mlp};

pub const OBS: usize = ObsHistory::LEN * FRAME;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: usize,
    pub latent: usize,
    pub init_log_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 8,
            init_log_std: -0.7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CopilotNets {
    pub cfg: NetConfig,
    pub encoder: Mlp,
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: ParamId,
    pub student: Mlp,
}

/// Which latent feeds the action head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    Teacher,
    Student,
}

pub struct Forward {
    /// Bounded action mean `[B, 6]`.
    pub mean: Var,
    /// `[B, 1]`, teacher latent only.
    pub value: Option<Var>,
    pub latent: Var,
}

impl CopilotNets {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<f32>, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let (h, l) = (cfg.hidden, cfg.latent);
        if h == 0 || l == 0 {
            return contract("copilot widths must be positive");
        }
        let encoder = Mlp::new(store, "copilot.encoder", &[PRIVILEGED, h, l], Activation::Tanh, Init::Scaled(1.0), true, rng)?;
        let actor = Mlp::new(store, "copilot.actor", &[OBS + l, h, h, JOINTS], Activation::Tanh, Init::Scaled(0.1), true, rng)?;
        let critic = Mlp::new(store, "copilot.critic", &[OBS + l, h, h, 1], Activation::Tanh, Init::Scaled(1.0), true, rng)?;
        let log_std = store.add("copilot.log_std", Tensor::full(vec![JOINTS], cfg.init_log_std as f32), true)?;
        let student = Mlp::new(store, "copilot.student", &[OBS, h, h, l], Activation::Tanh, Init::Scaled(1.0), true, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            actor,
            critic,
            log_std,
            student,
        })
    }

    pub fn encode_privileged(&self, s: &Session<f32>, e: Var) -> Result<Var> {
        self.encoder.forward(s, e)
    }

    pub fn encode_student(&self, s: &Session<f32>, obs: Var) -> Result<Var> {
        self.student.forward(s, obs)
    }

    pub fn forward(&self, s: &Session<f32>, obs: &[f64], privileged: Option<&[f64]>, source: LatentSource) -> Result<Forward> {
        let b = obs.len() / OBS;
        if b == 0 || obs.len() != b * OBS {
            return contract(format!("copilot observations must be a multiple of {OBS}"));
        }
        let o = s.constant(Tensor::from_f64(vec![b, OBS], obs)?);
        let latent = match source {
            LatentSource::Teacher => {
                let e = privileged.ok_or_else(|| Error::Contract("teacher needs privileged input".into()))?;
                if e.len() != b * PRIVILEGED {
                    return contract("privileged batch size mismatch");
                }
                let e = s.constant(Tensor::from_f64(vec![b, PRIVILEGED], e)?);
                self.encode_privileged(s, e)?
            }
            LatentSource::Student => self.encode_student(s, o)?,
        };
        let x = s.concat(&[o, latent], 1)?;
        let mean = s.tanh(self.actor.forward(s, x)?);
        let value = match source {
            LatentSource::Teacher => Some(self.critic.forward(s, x)?),
            LatentSource::Student => None,
        };
        Ok(Forward { mean, value, latent })
    }

    /// Teacher parameters (encoder, actor, critic, log-std).
    pub fn teacher_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.log_std];
        for m in [&self.encoder, &self.actor, &self.critic] {
            for l in &m.layers {
                ids.push(l.w);
                ids.extend(l.b);
            }
        }
        ids
    }

    pub fn student_params(&self) -> Vec<ParamId> {
        self.student.layers.iter().flat_map(|l| std::iter::once(l.w).chain(l.b)).collect()
    }
}

/// A trained copilot: networks plus their weights.
#[derive(Clone, Debug)]
pub struct Copilot {
    pub nets: CopilotNets,
    pub store: ParamStore<f32>,
}

impl Copilot {
    pub fn new<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let nets = CopilotNets::new(&mut store, cfg, rng)?;
        Ok(Self { nets, store })
    }

    /// Deterministic action from the student path: the bounded policy mean.
    pub fn act(&self, history: &ObsHistory) -> Result<[f64; JOINTS]> {
        let s = Session::inference(&self.store);
        let f = self.nets.forward(&s, &history.flat(), None, LatentSource::Student)?;
        let v = s.value(f.mean).to_f64();
        let mut a = [0.0; JOINTS];
        a.copy_from_slice(&v);
        Ok(a)
    }

    /// Deterministic teacher action (needs privileged features).
    pub fn act_teacher(&self, history: &ObsHistory, privileged: &[f64]) -> Result<[f64; JOINTS]> {
        let s = Session::inference(&self.store);
        let f = self.nets.forward(&s, &history.flat(), Some(privileged), LatentSource::Teacher)?;
        let v = s.value(f.mean).to_f64();
        let mut a = [0.0; JOINTS];
        a.copy_from_slice(&v);
        Ok(a)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<f32> {
        let mut ck = Checkpoint::new(serde_json::json!({ "kind": "copilot", "net": self.nets.cfg }));
        for (name, t) in self.store.named() {
            ck.push(name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<Self> {
        let cfg: NetConfig = serde_json::from_value(ck.meta["net"].clone())?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut c = Self::new(&cfg, &mut rng)?;
        c.store.load_named(ck.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(c)
    }
}
