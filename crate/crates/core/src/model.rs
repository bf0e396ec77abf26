//! The complete velocity model: backbone, optional fusion block, residual head.

use std::fmt;
use std::str::FromStr;

use dexmode_autodiff::{ParamStore, Scalar, Session, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ModelConfig, ModelDims, ObsBatch, ResidualHead};
use crate::error::{Error, Result};
use crate::fusion::{FusionOutput, ModeBlock};

/// Ablation grid entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoForce,
    NoTactile,
    NoCopilot,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoForce,
        Variant::NoTactile,
        Variant::NoCopilot,
        Variant::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoForce => "no-force",
            Variant::NoTactile => "no-tactile",
            Variant::NoCopilot => "no-copilot",
            Variant::Baseline => "baseline",
        }
    }

    pub fn uses_fusion(self) -> bool {
        self != Variant::Baseline
    }

    pub fn uses_force(self) -> bool {
        !matches!(self, Variant::NoForce | Variant::Baseline)
    }

    pub fn uses_tactile(self) -> bool {
        !matches!(self, Variant::NoTactile | Variant::Baseline)
    }

    pub fn uses_copilot(self) -> bool {
        self != Variant::NoCopilot
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct VlaModel {
    pub cfg: ModelConfig,
    pub dims: ModelDims,
    pub backbone: Backbone,
    pub head: ResidualHead,
    pub mode: Option<ModeBlock>,
}

pub struct VelocityOut {
    /// `[B, H, d_a]`.
    pub v: Var,
    pub fusion: Option<FusionOutput>,
}

impl VlaModel {
    /// Backbone and head are drawn from `rng` before the fusion block, so a
    /// model with and one without fusion share those weights for equal seeds.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        dims: &ModelDims,
        with_fusion: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::new(store, cfg, dims, rng)?;
        let head = ResidualHead::new(store, cfg.d_pali, &dims.layout, rng)?;
        let mode = if with_fusion {
            Some(ModeBlock::new(store, cfg, dims, rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            dims: dims.clone(),
            backbone,
            head,
            mode,
        })
    }

    pub fn prefix<S: Scalar>(&self, s: &Session<S>, obs: &ObsBatch) -> Result<Var> {
        obs.validate(&self.dims)?;
        self.backbone.encode_prefix(s, obs)
    }

    /// Velocity given precomputed prefix tokens.
    pub fn velocity_with_prefix<S: Scalar>(
        &self,
        s: &Session<S>,
        obs: &ObsBatch,
        prefix: Var,
        x_t: Var,
        t: &[f64],
    ) -> Result<VelocityOut> {
        let suffix = self.backbone.encode_suffix(s, x_t, t, prefix)?;
        match &self.mode {
            None => Ok(VelocityOut {
                v: self.head.base_velocity(s, suffix)?,
                fusion: None,
            }),
            Some(mode) => {
                let fo = mode.forward(s, prefix, suffix, &obs.force, &obs.tactile)?;
                let v = self.head.forward(s, s.add(fo.zf, suffix)?, s.add(fo.zg, suffix)?)?;
                Ok(VelocityOut { v, fusion: Some(fo) })
            }
        }
    }

    pub fn velocity<S: Scalar>(&self, s: &Session<S>, obs: &ObsBatch, x_t: Var, t: &[f64]) -> Result<VelocityOut> {
        let prefix = self.prefix(s, obs)?;
        self.velocity_with_prefix(s, obs, prefix, x_t, t)
    }

    /// Flow-matching loss plus the weighted load-balance term.
    pub fn loss<S: Scalar>(
        &self,
        s: &Session<S>,
        obs: &ObsBatch,
        x0: &[f64],
        eps: &[f64],
        t: &[f64],
    ) -> Result<(Var, VelocityOut)> {
        let b = obs.batch;
        let per = self.cfg.horizon * self.dims.d_a();
        if b == 0 || x0.len() != b * per || eps.len() != b * per || t.len() != b {
            return crate::error::contract(format!("loss batch of {b} needs {per} action values per sample"));
        }
        let shape = vec![b, self.cfg.horizon, self.dims.d_a()];
        let mut xt = Vec::with_capacity(b * per);
        for ((a, e), &t) in x0.chunks(per).zip(eps.chunks(per)).zip(t) {
            xt.extend(crate::flow::interpolate(a, e, t)?);
        }
        let x0v = s.constant(Tensor::from_f64(shape.clone(), x0)?);
        let epsv = s.constant(Tensor::from_f64(shape.clone(), eps)?);
        let xtv = s.constant(Tensor::from_f64(shape, &xt)?);
        let out = self.velocity(s, obs, xtv, t)?;
        let mut loss = crate::flow::fm_loss(s, out.v, x0v, epsv)?;
        if let Some(aux) = out.fusion.as_ref().and_then(|f| f.aux) {
            loss = s.add(loss, s.scale(aux, self.cfg.aux_coef)?)?;
        }
        Ok((loss, out))
    }
}
