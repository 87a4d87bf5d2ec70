//! Parameterized layers built on the graph kernels.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{GidError, Result};

pub const LN_EPS: f64 = 1e-5;

/// How a layer's output projection is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Zero,
}

fn xavier<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Xavier => xavier(&[fan_in, fan_out], fan_in, fan_out, rng),
            Init::Zero => Tensor::zeros(&[fan_in, fan_out]),
        };
        Linear {
            w: ps.push(format!("{name}.w"), w),
            b: ps.push(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

/// `groups` independent linear maps applied to axis `-2` of the input.
#[derive(Clone, Debug)]
pub struct GroupedLinear {
    pub w: ParamId,
    pub b: ParamId,
}

impl GroupedLinear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        groups: usize,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Xavier => xavier(&[groups, fan_in, fan_out], fan_in, fan_out, rng),
            Init::Zero => Tensor::zeros(&[groups, fan_in, fan_out]),
        };
        GroupedLinear {
            w: ps.push(format!("{name}.w"), w),
            b: ps.push(format!("{name}.b"), Tensor::zeros(&[groups, fan_out])),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.grouped_linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: ps.push(format!("{name}.gain"), Tensor::full(&[dim], S::one())),
            bias: ps.push(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], LN_EPS)
    }
}

/// Multi-head self-attention over axis 1 of a `[A, L, B, D]` tensor.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(GidError::Config(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, Init::Xavier, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, Init::Xavier, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, Init::Xavier, rng),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, Init::Xavier, rng),
            heads,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let a = g.attention(q, k, v, self.heads, causal)?;
        self.out.forward(g, p, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden, Init::Xavier, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim, Init::Xavier, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

/// Which axis of a `[B, T, M, D]` activation a block attends across.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqAxis {
    Time,
    Sensor,
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub axis: SeqAxis,
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        axis: SeqAxis,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Block {
            axis,
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, ffn_hidden, rng),
        })
    }

    /// `x` is `[B, T, M, D]`; causal masking only applies along time.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, causal: bool) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(GidError::shape("block", &shape, &[0, 0, 0, 0]));
        }
        let h = self.ln_attn.forward(g, p, x)?;
        let a = match self.axis {
            SeqAxis::Time => self.attn.forward(g, p, h, causal)?,
            SeqAxis::Sensor => {
                let (b, t, m, d) = (shape[0], shape[1], shape[2], shape[3]);
                let h = g.reshape(h, &[b * t, m, 1, d])?;
                let a = self.attn.forward(g, p, h, false)?;
                g.reshape(a, &shape)?
            }
        };
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        g.add(x, f)
    }
}
