use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::{ParamStore, Scalar, Tensor};

/// Hyperparameters of decoupled-weight-decay Adam with cosine decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Step count over which the learning rate decays to zero.
    pub horizon: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            horizon: 1000,
        }
    }
}

/// `0.5 * (1 + cos(pi * step / horizon))`, held at zero past the horizon.
pub fn cosine_multiplier(step: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return 1.0;
    }
    let s = step.min(horizon) as f64;
    0.5 * (1.0 + (PI * s / horizon as f64).cos())
}

#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub config: AdamWConfig,
    pub step: usize,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(config: AdamWConfig, store: &ParamStore<S>) -> Self {
        let zeros = |_| -> Vec<Tensor<S>> {
            store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * cosine_multiplier(self.step, self.config.horizon)
    }

    pub fn moments(&self, index: usize) -> (&Tensor<S>, &Tensor<S>) {
        (&self.m[index], &self.v[index])
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; `None` (or a
    /// frozen parameter) leaves that parameter and its moments untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return contract(format!(
                "optimizer expects {} gradients, got {}",
                store.len(),
                grads.len()
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != store.get(id).shape() {
                    return contract(format!(
                        "gradient shape {:?} differs from parameter {} {:?}",
                        g.shape(),
                        store.name(id),
                        store.get(id).shape()
                    ));
                }
            }
        }
        let c = &self.config;
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (S::from_f64_lossy(1.0 - c.beta1), S::from_f64_lossy(1.0 - c.beta2));
        let step_size = S::from_f64_lossy(lr / bc1);
        let inv_bc2_sqrt = S::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = S::from_f64_lossy(c.eps);
        let decay = S::from_f64_lossy(1.0 - lr * c.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Moment tensors named after their parameters, for checkpointing.
    pub fn export(&self, store: &ParamStore<S>) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (k, id) in store.ids().enumerate() {
            out.push((format!("adam.m/{}", store.name(id)), self.m[k].clone()));
            out.push((format!("adam.v/{}", store.name(id)), self.v[k].clone()));
        }
        out
    }

    pub fn import(&mut self, store: &ParamStore<S>, lookup: impl Fn(&str) -> Option<Tensor<S>>, step: usize) -> Result<()> {
        for (k, id) in store.ids().enumerate() {
            let name = store.name(id);
            let (Some(m), Some(v)) = (lookup(&format!("adam.m/{name}")), lookup(&format!("adam.v/{name}"))) else {
                return contract(format!("optimizer state for {name} missing"));
            };
            if m.shape() != store.get(id).shape() || v.shape() != store.get(id).shape() {
                return contract(format!("optimizer state for {name} has wrong shape"));
            }
            self.m[k] = m;
            self.v[k] = v;
        }
        self.step = step;
        Ok(())
    }
}
