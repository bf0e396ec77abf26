//! Flow-matching objective and Euler sampler.
//!
//! Clean actions sit at `t = 0` and Gaussian noise at `t = 1`; the regressed
//! velocity is `eps - x0`, so integrating from 1 down to 0 transports noise
//! back onto the data.

use std::ops::Range;

use dexmode_autodiff::{Scalar, Session, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Column ranges of the action vector. `other` holds the waist columns and the
/// trigger column, which is the last column of `other`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionLayout {
    pub arm: Range<usize>,
    pub hand: Range<usize>,
    pub other: Range<usize>,
}

impl ActionLayout {
    /// Contiguous `[arm | hand | other]` layout.
    pub fn contiguous(arm: usize, hand: usize, other: usize) -> Result<Self> {
        let layout = Self {
            arm: 0..arm,
            hand: arm..arm + hand,
            other: arm + hand..arm + hand + other,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn dim(&self) -> usize {
        self.arm.len() + self.hand.len() + self.other.len()
    }

    pub fn trigger(&self) -> usize {
        self.other.end - 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut marks = vec![0u8; self.dim()];
        for r in [&self.arm, &self.hand, &self.other] {
            for i in r.clone() {
                match marks.get_mut(i) {
                    Some(m) => *m += 1,
                    None => return contract(format!("action range {r:?} exceeds dimension {}", self.dim())),
                }
            }
        }
        if marks.iter().any(|&m| m != 1) {
            return contract("action ranges must be disjoint and cover every column");
        }
        if self.other.is_empty() {
            return contract("the other group must contain at least the trigger column");
        }
        Ok(())
    }
}

/// Row-major `h x d_a` action block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub h: usize,
    pub d_a: usize,
    pub data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(h: usize, d_a: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || d_a == 0 || data.len() != h * d_a {
            return contract(format!("chunk {h}x{d_a} cannot hold {} values", data.len()));
        }
        Ok(Self { h, d_a, data })
    }

    pub fn zeros(h: usize, d_a: usize) -> Self {
        Self { h, d_a, data: vec![0.0; h * d_a] }
    }

    pub fn gaussian<R: Rng + ?Sized>(h: usize, d_a: usize, rng: &mut R) -> Self {
        let data = (0..h * d_a).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        Self { h, d_a, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d_a..(i + 1) * self.d_a]
    }
}

/// Inverse CDF of Beta(1.5, 1): the CDF is `t^1.5`.
pub fn timestep_from_uniform(u: f64) -> f64 {
    u.clamp(0.0, 1.0).powf(1.0 / 1.5)
}

pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    timestep_from_uniform(rng.gen::<f64>())
}

/// `t * eps + (1 - t) * x0`.
pub fn interpolate(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return contract(format!("interpolate: {} vs {} values", x0.len(), eps.len()));
    }
    Ok(x0.iter().zip(eps).map(|(&a, &e)| t * e + (1.0 - t) * a).collect())
}

/// Mean squared error against `eps - x0`, as a graph node.
pub fn fm_loss<S: Scalar>(s: &Session<S>, v_pred: Var, x0: Var, eps: Var) -> Result<Var> {
    for (name, v) in [("v_pred", v_pred), ("x0", x0), ("eps", eps)] {
        if !s.value_ref(v).is_finite() {
            return Err(Error::NonFinite(format!("flow-matching input {name}")));
        }
    }
    let target = s.sub(eps, x0)?;
    Ok(s.mse(v_pred, target)?)
}

/// Plain-value version of [`fm_loss`].
pub fn fm_loss_value(v_pred: &[f64], x0: &[f64], eps: &[f64]) -> Result<f64> {
    if v_pred.len() != x0.len() || x0.len() != eps.len() || v_pred.is_empty() {
        return contract("fm_loss: incongruent inputs");
    }
    if v_pred.iter().chain(x0).chain(eps).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flow-matching input".into()));
    }
    let sum: f64 = v_pred
        .iter()
        .zip(x0.iter().zip(eps))
        .map(|(&v, (&a, &e))| (v - (e - a)).powi(2))
        .sum();
    Ok(sum / v_pred.len() as f64)
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` to `t = 0` in `n` steps of
/// `dt = -1/n`.
pub fn euler_sample<F>(mut velocity: F, noise: Vec<f64>, n: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if n == 0 {
        return contract("euler_sample needs at least one step");
    }
    let dt = -1.0 / n as f64;
    let mut x = noise;
    for k in 0..n {
        let t = 1.0 - k as f64 / n as f64;
        let v = velocity(&x, t)?;
        if v.len() != x.len() {
            return contract(format!("velocity has {} values, state has {}", v.len(), x.len()));
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state at step {k}")));
        }
    }
    Ok(x)
}
