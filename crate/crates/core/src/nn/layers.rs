//! Parameterized building blocks shared by the base encoder and the heads.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, SeqLayout, Var};
use crate::nn::tensor::{ParamId, ParamStore, Tensor};

/// Glorot-uniform: `U(±sqrt(6 / (fan_in + fan_out)))`.
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

/// Fully connected `x·w + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.register(format!("{name}.w"), glorot(&[d_in, d_out], d_in, d_out, rng));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.linear(x, p[self.w.index()], p[self.b.index()])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain.index()], p[self.bias.index()])
    }
}

/// Fused query/key/value projection plus output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub qkv: Dense,
    pub out: Dense,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        check_heads(d, heads)?;
        let qkv = Dense {
            w: store.register(format!("{name}.qkv.w"), glorot(&[d, 3 * d], d, d, rng)),
            b: store.register(format!("{name}.qkv.b"), Tensor::zeros(&[3 * d])),
        };
        let out = Dense::new(store, &format!("{name}.out"), d, d, rng);
        Ok(Self { qkv, out, heads })
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::precondition(
            "multi_head_attention",
            format!("{heads} heads do not divide dimension {d}"),
        ));
    }
    Ok(())
}

/// Multi-head self-attention over `[batch·len, d]` rows. No positional
/// signal is added here.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &[Var],
    x: Var,
    params: &AttentionParams,
    layout: &Arc<SeqLayout>,
) -> Result<Var> {
    let d = g.shape(x).get(1).copied().unwrap_or(0);
    check_heads(d, params.heads)?;
    let qkv = params.qkv.forward(g, p, x)?;
    let ctx = g.attention(qkv, params.heads, layout)?;
    params.out.forward(g, p, ctx)
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`
/// with a ReLU feed-forward of width `2·d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ff1: Dense,
    pub ff2: Dense,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let ln1 = LayerNormParams::new(store, &format!("{name}.ln1"), d);
        let attn = AttentionParams::new(store, &format!("{name}.attn"), d, heads, rng)?;
        let ln2 = LayerNormParams::new(store, &format!("{name}.ln2"), d);
        let ff1 = Dense::new(store, &format!("{name}.ff1"), d, 2 * d, rng);
        let ff2 = Dense::new(store, &format!("{name}.ff2"), 2 * d, d, rng);
        Ok(Self {
            ln1,
            attn,
            ln2,
            ff1,
            ff2,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, layout: &Arc<SeqLayout>) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let a = multi_head_attention(g, p, h, &self.attn, layout)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.ff1.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.ff2.forward(g, p, h)?;
        g.add(x, h)
    }
}
