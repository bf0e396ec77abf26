//! Layers shared by the action model and the copilot networks. Layers hold
//! parameter ids only; weights live in a [`ParamStore`] so the same layer
//! definition serves f32 training and f64 gradient checks.

use dexmode_autodiff::{ParamId, ParamStore, Scalar, Session, Tensor, Var};
use rand::Rng;

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Scaled(f64),
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match init {
            Init::Scaled(gain) => Tensor::randn(vec![in_dim, out_dim], gain / (in_dim as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(vec![in_dim, out_dim]),
        };
        let w = store.add(format!("{name}.w"), w, trainable)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(vec![out_dim]), trainable)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// `x @ W + b` over the last axis of `x`.
    pub fn forward<S: Scalar>(&self, s: &Session<S>, x: Var) -> Result<Var> {
        let shape = s.shape(x);
        if shape.last() != Some(&self.in_dim) {
            return contract(format!("linear expects last dim {}, got {shape:?}", self.in_dim));
        }
        let y = s.matmul(x, s.p(self.w))?;
        Ok(match self.b {
            Some(b) => s.add(y, s.p(b))?,
            None => y,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Gelu,
}

fn activate<S: Scalar>(s: &Session<S>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Tanh => s.tanh(x),
        Activation::Gelu => s.gelu(x),
    }
}

/// Stack of linear layers with an activation between them (none after the
/// last layer).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dims: &[usize],
        act: Activation,
        last_init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return contract("mlp needs at least input and output widths");
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            let init = if last { last_init } else { Init::Scaled(1.0) };
            layers.push(Linear::new(
                store,
                &format!("{name}.{i}"),
                dims[i],
                dims[i + 1],
                true,
                init,
                trainable,
                rng,
            )?);
        }
        Ok(Self { layers, act })
    }

    pub fn forward<S: Scalar>(&self, s: &Session<S>, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(s, x)?;
            if i + 1 < n {
                x = activate(s, x, self.act);
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }
}

/// Multi-head attention over `[batch, tokens, width]` sequences.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

pub struct AttentionOut {
    pub out: Var,
    /// Attention probabilities per head, `[batch, queries, keys]`.
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return contract(format!("width {width} not divisible into {heads} heads"));
        }
        let mk = |store: &mut ParamStore<S>, part: &str, bias: bool, rng: &mut R| {
            Linear::new(store, &format!("{name}.{part}"), width, width, bias, Init::Scaled(1.0), trainable, rng)
        };
        // A key bias only shifts each score row by a constant, which softmax
        // cancels, so it is omitted.
        Ok(Self {
            q: mk(store, "q", true, rng)?,
            k: mk(store, "k", false, rng)?,
            v: mk(store, "v", true, rng)?,
            o: mk(store, "o", true, rng)?,
            heads,
            width,
        })
    }

    /// Queries from `query`, keys and values from `context`; no masking.
    pub fn forward<S: Scalar>(&self, s: &Session<S>, query: Var, context: Var) -> Result<AttentionOut> {
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, context)?;
        let v = self.v.forward(s, context)?;
        let dh = self.width / self.heads;
        let last = s.shape(q).len() - 1;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = s.split(q, last, h * dh, dh)?;
            let kh = s.split(k, last, h * dh, dh)?;
            let vh = s.split(v, last, h * dh, dh)?;
            let kt = s.transpose(kh)?;
            let scores = s.matmul(qh, kt)?;
            let scores = s.scale(scores, scale)?;
            let w = s.softmax(scores);
            outs.push(s.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { s.concat(&outs, last)? };
        Ok(AttentionOut {
            out: self.o.forward(s, cat)?,
            weights,
        })
    }
}

/// `PE(pos)[2i] = sin(pos / 10000^(2i/d))`, `PE(pos)[2i+1] = cos(..)`.
pub fn sinusoid(pos: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let arg = pos / 10000f64.powf(i2 / width as f64);
            if j % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

pub fn to_tensor<S: Scalar>(shape: Vec<usize>, data: &[f64]) -> Result<Tensor<S>> {
    Ok(Tensor::from_f64(shape, data)?)
}
