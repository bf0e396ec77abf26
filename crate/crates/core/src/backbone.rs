//! Stand-in for the pretrained vision-language backbone and action expert.
//!
//! The prefix (vision proxy, instruction, proprioception) is lifted to
//! `d_pali` and mixed by one frozen self-attention layer. The suffix lifts a
//! noisy action chunk, adds a timestep embedding and a per-step position code,
//! then runs trainable layers whose keys and values span prefix and suffix.

use dexmode_autodiff::{ParamId, ParamStore, Scalar, Session, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::flow::ActionLayout;
use crate::nn::{sinusoid, Activation, Attention, Init, Linear, Mlp};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_pali: usize,
    pub horizon: usize,
    pub experts: usize,
    pub euler_steps: usize,
    pub sfx_layers: usize,
    pub heads: usize,
    pub aux_loss: bool,
    pub aux_coef: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_pali: 32,
            horizon: 8,
            experts: 8,
            euler_steps: 10,
            sfx_layers: 2,
            heads: 4,
            aux_loss: true,
            aux_coef: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_pali == 0 || self.d_pali % 2 != 0 {
            return contract(format!("d_pali must be a positive even number, got {}", self.d_pali));
        }
        if self.heads == 0 || self.d_pali % self.heads != 0 {
            return contract(format!("d_pali {} not divisible by {} heads", self.d_pali, self.heads));
        }
        if self.horizon == 0 || self.experts == 0 || self.euler_steps == 0 {
            return contract("horizon, experts and euler_steps must be positive");
        }
        if !(self.aux_coef >= 0.0 && self.aux_coef.is_finite()) {
            return contract("aux_coef must be finite and non-negative");
        }
        Ok(())
    }
}

/// Input and action widths fixed by the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_v: usize,
    pub d_s: usize,
    pub d_f: usize,
    pub d_g: usize,
    pub instructions: usize,
    pub layout: ActionLayout,
}

impl ModelDims {
    pub fn d_a(&self) -> usize {
        self.layout.dim()
    }
}

/// One observation as emitted by an environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub vision: Vec<f64>,
    pub instruction: usize,
    pub proprio: Vec<f64>,
    pub force: Vec<f64>,
    pub tactile: Vec<f64>,
}

impl Observation {
    pub fn is_finite(&self) -> bool {
        self.vision
            .iter()
            .chain(&self.proprio)
            .chain(&self.force)
            .chain(&self.tactile)
            .all(|v| v.is_finite())
    }
}

/// Row-major batch of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsBatch {
    pub batch: usize,
    pub vision: Vec<f64>,
    pub instruction: Vec<usize>,
    pub proprio: Vec<f64>,
    pub force: Vec<f64>,
    pub tactile: Vec<f64>,
}

impl ObsBatch {
    pub fn from_obs<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Self {
        let mut b = ObsBatch {
            batch: 0,
            vision: vec![],
            instruction: vec![],
            proprio: vec![],
            force: vec![],
            tactile: vec![],
        };
        for o in obs {
            b.batch += 1;
            b.vision.extend_from_slice(&o.vision);
            b.instruction.push(o.instruction);
            b.proprio.extend_from_slice(&o.proprio);
            b.force.extend_from_slice(&o.force);
            b.tactile.extend_from_slice(&o.tactile);
        }
        b
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let n = self.batch;
        if n == 0 {
            return contract("empty observation batch");
        }
        for (name, len, d) in [
            ("vision", self.vision.len(), dims.d_v),
            ("proprio", self.proprio.len(), dims.d_s),
            ("force", self.force.len(), dims.d_f),
            ("tactile", self.tactile.len(), dims.d_g),
            ("instruction", self.instruction.len(), 1),
        ] {
            if len != n * d {
                return contract(format!("{name}: expected {n}x{d} values, got {len}"));
            }
        }
        if let Some(&i) = self.instruction.iter().find(|&&i| i >= dims.instructions) {
            return contract(format!("instruction id {i} out of range {}", dims.instructions));
        }
        if self.vision.iter().chain(&self.proprio).chain(&self.force).chain(&self.tactile).any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite("observation batch".into()));
        }
        Ok(())
    }
}

/// Sinusoidal codes for steps `1..=h`, shape `[h, width]`.
pub fn step_codes(h: usize, width: usize) -> Vec<f64> {
    (1..=h).flat_map(|p| sinusoid(p as f64, width)).collect()
}

/// Embedding of the denoising time; `t` is stretched so that distinct times
/// in `[0, 1]` land on well separated phases.
pub fn time_code(t: f64, width: usize) -> Vec<f64> {
    sinusoid(t * 1000.0, width)
}

#[derive(Clone, Debug)]
pub struct SuffixLayer {
    pub attn: Attention,
    pub ff: Mlp,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub width: usize,
    pub horizon: usize,
    pub lift_vision: Linear,
    pub instr_table: ParamId,
    pub lift_proprio: Linear,
    pub prefix_attn: Attention,
    pub lift_action: Linear,
    pub lift_time: Linear,
    pub layers: Vec<SuffixLayer>,
    d_v: usize,
    d_s: usize,
    d_a: usize,
    instructions: usize,
}

/// Number of prefix rows: vision, instruction, proprioception.
pub const PREFIX_ROWS: usize = 3;

impl Backbone {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        dims: &ModelDims,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        dims.layout.validate()?;
        let d = cfg.d_pali;
        let lift_vision = Linear::new(store, "prefix.vision", dims.d_v, d, true, Init::Scaled(1.0), false, rng)?;
        let instr_table = store.add("prefix.instruction", Tensor::randn(vec![dims.instructions, d], 1.0, rng), false)?;
        let lift_proprio = Linear::new(store, "prefix.proprio", dims.d_s, d, true, Init::Scaled(1.0), false, rng)?;
        let prefix_attn = Attention::new(store, "prefix.attn", d, cfg.heads, false, rng)?;
        let lift_action = Linear::new(store, "suffix.action", dims.d_a(), d, true, Init::Scaled(1.0), true, rng)?;
        let lift_time = Linear::new(store, "suffix.time", d, d, false, Init::Scaled(1.0), true, rng)?;
        let mut layers = Vec::with_capacity(cfg.sfx_layers);
        for l in 0..cfg.sfx_layers {
            let attn = Attention::new(store, &format!("suffix.{l}.attn"), d, cfg.heads, true, rng)?;
            let ff = Mlp::new(store, &format!("suffix.{l}.ff"), &[d, 4 * d, d], Activation::Gelu, Init::Scaled(1.0), true, rng)?;
            layers.push(SuffixLayer { attn, ff });
        }
        Ok(Self {
            width: d,
            horizon: cfg.horizon,
            lift_vision,
            instr_table,
            lift_proprio,
            prefix_attn,
            lift_action,
            lift_time,
            layers,
            d_v: dims.d_v,
            d_s: dims.d_s,
            d_a: dims.d_a(),
            instructions: dims.instructions,
        })
    }

    /// Prefix tokens `[B, 3, d]`.
    pub fn encode_prefix<S: Scalar>(&self, s: &Session<S>, obs: &ObsBatch) -> Result<Var> {
        let b = obs.batch;
        if obs.vision.len() != b * self.d_v || obs.proprio.len() != b * self.d_s || obs.instruction.len() != b {
            return contract(format!(
                "prefix expects vision {} and proprio {} per sample",
                self.d_v, self.d_s
            ));
        }
        if obs.instruction.iter().any(|&i| i >= self.instructions) {
            return contract("instruction id out of range");
        }
        let d = self.width;
        let v = s.constant(Tensor::from_f64(vec![b, self.d_v], &obs.vision)?);
        let p = s.constant(Tensor::from_f64(vec![b, self.d_s], &obs.proprio)?);
        let rows = [
            self.lift_vision.forward(s, v)?,
            s.gather_rows(s.p(self.instr_table), &obs.instruction)?,
            self.lift_proprio.forward(s, p)?,
        ];
        let rows: Vec<Var> = rows.iter().map(|&r| s.reshape(r, &[b, 1, d])).collect::<std::result::Result<_, _>>()?;
        let x = s.concat(&rows, 1)?;
        let a = self.prefix_attn.forward(s, x, x)?;
        Ok(s.layer_norm(s.add(x, a.out)?))
    }

    /// Suffix tokens `[B, H, d]` for noisy actions `x_t` of shape `[B, H, d_a]`.
    pub fn encode_suffix<S: Scalar>(&self, s: &Session<S>, x_t: Var, t: &[f64], prefix: Var) -> Result<Var> {
        let shape = s.shape(x_t);
        let b = t.len();
        if shape != [b, self.horizon, self.d_a] {
            return contract(format!("noisy chunk shape {shape:?}, expected [{b}, {}, {}]", self.horizon, self.d_a));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return contract(format!("timestep {bad} outside [0, 1]"));
        }
        let d = self.width;
        let times: Vec<f64> = t.iter().flat_map(|&t| time_code(t, d)).collect();
        let times = s.constant(Tensor::from_f64(vec![b, 1, d], &times)?);
        let steps = s.constant(Tensor::from_f64(vec![self.horizon, d], &step_codes(self.horizon, d))?);
        let mut x = self.lift_action.forward(s, x_t)?;
        x = s.add(x, self.lift_time.forward(s, times)?)?;
        x = s.add(x, steps)?;
        for layer in &self.layers {
            let ctx = s.concat(&[prefix, x], 1)?;
            let a = layer.attn.forward(s, x, ctx)?;
            x = s.layer_norm(s.add(x, a.out)?);
            let f = layer.ff.forward(s, x)?;
            x = s.layer_norm(s.add(x, f)?);
        }
        Ok(x)
    }
}

/// Read-out from tokens to velocities. `w1` emits the arm and other columns,
/// `w2` the hand columns.
#[derive(Clone, Debug)]
pub struct ResidualHead {
    pub w1: Linear,
    pub w2: Linear,
    pub layout: ActionLayout,
}

impl ResidualHead {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        width: usize,
        layout: &ActionLayout,
        rng: &mut R,
    ) -> Result<Self> {
        layout.validate()?;
        if layout.arm.is_empty() || layout.hand.is_empty() {
            return contract("head needs non-empty arm and hand groups");
        }
        if layout.arm.start != 0 || layout.hand.start != layout.arm.end || layout.other.start != layout.hand.end {
            return contract("head expects an [arm | hand | other] column order");
        }
        let w1 = Linear::new(store, "head.w1", width, layout.arm.len() + layout.other.len(), true, Init::Scaled(1.0), true, rng)?;
        let w2 = Linear::new(store, "head.w2", width, layout.hand.len(), true, Init::Scaled(1.0), true, rng)?;
        Ok(Self { w1, w2, layout: layout.clone() })
    }

    /// `[W1 za | W2 zh]` reassembled into action column order.
    pub fn forward<S: Scalar>(&self, s: &Session<S>, za: Var, zh: Var) -> Result<Var> {
        let o1 = self.w1.forward(s, za)?;
        let o2 = self.w2.forward(s, zh)?;
        let last = s.shape(o1).len() - 1;
        let arm = self.layout.arm.len();
        let parts = [
            s.split(o1, last, 0, arm)?,
            o2,
            s.split(o1, last, arm, self.layout.other.len())?,
        ];
        Ok(s.concat(&parts, last)?)
    }

    /// Backbone-only velocity.
    pub fn base_velocity<S: Scalar>(&self, s: &Session<S>, suffix: Var) -> Result<Var> {
        self.forward(s, suffix, suffix)
    }
}
