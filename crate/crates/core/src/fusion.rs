//! Force/tactile expert fusion.
//!
//! Each modal reading is projected to `d_pali`, tiled over the horizon with a
//! per-step sinusoid, attended jointly with prefix and suffix tokens, routed
//! token-by-token to one of `E` expert MLPs and injected as a residual
//! correction on the suffix tokens.

use dexmode_autodiff::{ParamStore, Scalar, Session, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{step_codes, ModelConfig, ModelDims};
use crate::error::{contract, Result};
use crate::nn::{Activation, Attention, Init, Linear, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Force,
    Tactile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterAssignment {
    pub expert: usize,
    pub gate: f64,
    pub probs: Vec<f64>,
}

/// Top-1 selection over a probability row. Ties go to the lowest index.
pub fn route_top1(probs: &[f64]) -> RouterAssignment {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    RouterAssignment {
        expert: best,
        gate: probs[best],
        probs: probs.to_vec(),
    }
}

/// Softmax of router logits followed by [`route_top1`].
pub fn route_logits(logits: &[f64]) -> RouterAssignment {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    route_top1(&e.iter().map(|v| v / z).collect::<Vec<_>>())
}

/// Shannon entropy (nats) of the expert histogram of `routes`.
pub fn routing_entropy(routes: &[&RouterAssignment], experts: usize) -> f64 {
    if routes.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; experts];
    for r in routes {
        counts[r.expert] += 1;
    }
    let n = routes.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `z` of shape `[B, d]` tiled to `[B, H, d]`, row `h` offset by `PE(h + 1)`.
pub fn tile_with_pe<S: Scalar>(s: &Session<S>, z: Var, h: usize) -> Result<Var> {
    let shape = s.shape(z);
    if shape.len() != 2 || h == 0 {
        return contract(format!("tile expects [B, d] and h >= 1, got {shape:?}, h = {h}"));
    }
    let (b, d) = (shape[0], shape[1]);
    let pe = s.constant(Tensor::from_f64(vec![h, d], &step_codes(h, d))?);
    Ok(s.add(s.reshape(z, &[b, 1, d])?, pe)?)
}

/// `[prefix | suffix | force | tactile]` along the token axis, with the start
/// index of the suffix, force and tactile streams.
pub fn concat_streams<S: Scalar>(
    s: &Session<S>,
    prefix: Var,
    suffix: Var,
    zf: Var,
    zg: Var,
) -> Result<(Var, [usize; 3])> {
    let shapes = [s.shape(prefix), s.shape(suffix), s.shape(zf), s.shape(zg)];
    for sh in &shapes {
        if sh.len() != 3 || sh[0] != shapes[0][0] || sh[2] != shapes[0][2] {
            return contract(format!("stream shapes disagree: {shapes:?}"));
        }
    }
    let a = shapes[0][1];
    let b = a + shapes[1][1];
    let c = b + shapes[2][1];
    Ok((s.concat(&[prefix, suffix, zf, zg], 1)?, [a, b, c]))
}

pub struct FusionOutput {
    /// Refined force tokens `[B, H, d]`.
    pub zf: Var,
    /// Refined tactile tokens `[B, H, d]`.
    pub zg: Var,
    /// Assignments in `(sample, step)` order.
    pub force_routes: Vec<RouterAssignment>,
    pub tactile_routes: Vec<RouterAssignment>,
    /// Load-balance term `sum_e f_e * P_e`, present when enabled.
    pub aux: Option<Var>,
    /// Joint attention probabilities per head.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ModeBlock {
    pub proj_f: Linear,
    pub proj_g: Linear,
    pub attn: Attention,
    pub router: Linear,
    pub experts: Vec<Mlp>,
    pub out_f: Linear,
    pub out_g: Linear,
    pub horizon: usize,
    pub width: usize,
    pub aux_loss: bool,
    /// When false the joint attention stage is skipped so each modality only
    /// reaches its own head columns.
    pub attention_mixing: bool,
}

impl ModeBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        dims: &ModelDims,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_pali;
        let proj_f = Linear::new(store, "mode.proj_f", dims.d_f, d, true, Init::Scaled(1.0), true, rng)?;
        let proj_g = Linear::new(store, "mode.proj_g", dims.d_g, d, true, Init::Scaled(1.0), true, rng)?;
        let attn = Attention::new(store, "mode.attn", d, cfg.heads, true, rng)?;
        let router = Linear::new(store, "mode.router", d, cfg.experts, true, Init::Scaled(1.0), true, rng)?;
        let experts = (0..cfg.experts)
            .map(|e| {
                Mlp::new(store, &format!("mode.expert.{e}"), &[d, 4 * d, d], Activation::Gelu, Init::Scaled(1.0), true, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let out_f = Linear::new(store, "mode.out_f", d, d, true, Init::Zeros, true, rng)?;
        let out_g = Linear::new(store, "mode.out_g", d, d, true, Init::Zeros, true, rng)?;
        Ok(Self {
            proj_f,
            proj_g,
            attn,
            router,
            experts,
            out_f,
            out_g,
            horizon: cfg.horizon,
            width: d,
            aux_loss: cfg.aux_loss,
            attention_mixing: true,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// `W x + b` for a batch of readings laid out row-major, `[B, d]`.
    pub fn project_modal<S: Scalar>(&self, s: &Session<S>, reading: &[f64], batch: usize, m: Modality) -> Result<Var> {
        let lin = match m {
            Modality::Force => &self.proj_f,
            Modality::Tactile => &self.proj_g,
        };
        if batch == 0 || reading.len() != batch * lin.in_dim {
            return contract(format!(
                "{m:?} reading: expected {batch}x{} values, got {}",
                lin.in_dim,
                reading.len()
            ));
        }
        let x = s.constant(Tensor::from_f64(vec![batch, lin.in_dim], reading)?);
        lin.forward(s, x)
    }

    /// Token-level top-1 mixture over `tokens` of shape `[N, d]`:
    /// `tokens + gate * MLP_e(tokens)` per row.
    pub fn moe<S: Scalar>(&self, s: &Session<S>, tokens: Var) -> Result<(Var, Vec<RouterAssignment>, Var)> {
        let shape = s.shape(tokens);
        if shape.len() != 2 || shape[1] != self.width {
            return contract(format!("moe expects [N, {}], got {shape:?}", self.width));
        }
        let n = shape[0];
        let e = self.num_experts();
        let probs = s.softmax(self.router.forward(s, tokens)?);
        let pv = s.value(probs).to_f64();
        let routes: Vec<RouterAssignment> = pv.chunks(e).map(route_top1).collect();
        let flat = s.reshape(probs, &[n * e, 1])?;
        let gate_idx: Vec<usize> = routes.iter().enumerate().map(|(i, r)| i * e + r.expert).collect();
        let gates = s.gather_rows(flat, &gate_idx)?;
        let mut out = tokens;
        for (k, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = routes.iter().enumerate().filter(|(_, r)| r.expert == k).map(|(i, _)| i).collect();
            if rows.is_empty() {
                continue;
            }
            let x = s.gather_rows(tokens, &rows)?;
            let y = expert.forward(s, x)?;
            let g = s.gather_rows(gates, &rows)?;
            let y = s.mul(y, g)?;
            out = s.add(out, s.scatter_rows(y, &rows, n)?)?;
        }
        let mut frac = vec![0.0; e];
        for r in &routes {
            frac[r.expert] += 1.0 / n as f64;
        }
        let mean_p = s.scale(s.sum_axis(probs, 0)?, 1.0 / n as f64)?;
        let frac = s.constant(Tensor::from_f64(vec![e], &frac)?);
        let aux = s.sum(s.mul(mean_p, frac)?);
        Ok((out, routes, aux))
    }

    pub fn forward<S: Scalar>(
        &self,
        s: &Session<S>,
        prefix: Var,
        suffix: Var,
        force: &[f64],
        tactile: &[f64],
    ) -> Result<FusionOutput> {
        let b = s.shape(suffix)[0];
        let (h, d) = (self.horizon, self.width);
        let zf = tile_with_pe(s, self.project_modal(s, force, b, Modality::Force)?, h)?;
        let zg = tile_with_pe(s, self.project_modal(s, tactile, b, Modality::Tactile)?, h)?;
        let (mut zf, mut zg) = (zf, zg);
        let mut attention = Vec::new();
        if self.attention_mixing {
            let (z, bounds) = concat_streams(s, prefix, suffix, zf, zg)?;
            let rows = s.shape(z)[1];
            let pos = s.constant(Tensor::from_f64(vec![rows, d], &step_codes(rows, d))?);
            let z = s.add(z, pos)?;
            let a = self.attn.forward(s, z, z)?;
            attention = a.weights;
            let z = s.layer_norm(s.add(z, a.out)?);
            zf = s.split(z, 1, bounds[1], h)?;
            zg = s.split(z, 1, bounds[2], h)?;
        }
        let modal = s.reshape(s.concat(&[zf, zg], 1)?, &[b * 2 * h, d])?;
        let (mixed, routes, aux) = self.moe(s, modal)?;
        let mixed = s.reshape(mixed, &[b, 2 * h, d])?;
        let zf = self.out_f.forward(s, s.split(mixed, 1, 0, h)?)?;
        let zg = self.out_g.forward(s, s.split(mixed, 1, h, h)?)?;
        let mut force_routes = Vec::with_capacity(b * h);
        let mut tactile_routes = Vec::with_capacity(b * h);
        for (i, r) in routes.into_iter().enumerate() {
            if (i / h) % 2 == 0 {
                force_routes.push(r);
            } else {
                tactile_routes.push(r);
            }
        }
        Ok(FusionOutput {
            zf,
            zg,
            force_routes,
            tactile_routes,
            aux: self.aux_loss.then_some(aux),
            attention,
        })
    }
}
