//! Pre-norm transformer encoder and decoder blocks.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::layers::{Activation, ActivationCache, LayerNorm, LayerNormCache, Linear, LinearCache};
use crate::numerics::matrix::Matrix;
use crate::numerics::param::{join, Parameter, Params};

use super::attention::{AttentionCache, MultiHeadAttention};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

pub struct FeedForwardCache {
    c1: LinearCache,
    act: ActivationCache,
    c2: LinearCache,
}

impl FeedForward {
    pub fn new(d_model: usize, ffn_dim: usize, rng: &mut impl rand::Rng) -> Self {
        FeedForward {
            lin1: Linear::xavier(d_model, ffn_dim, rng),
            lin2: Linear::xavier(ffn_dim, d_model, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, FeedForwardCache) {
        let (h, c1) = self.lin1.forward(x);
        let (a, act) = Activation::Relu.forward(&h);
        let (y, c2) = self.lin2.forward(&a);
        (y, FeedForwardCache { c1, act, c2 })
    }

    pub fn backward(&mut self, cache: &FeedForwardCache, dy: &Matrix) -> Matrix {
        let da = self.lin2.backward(&cache.c2, dy);
        let dh = Activation::backward(&cache.act, &da);
        self.lin1.backward(&cache.c1, &dh)
    }
}

impl Params for FeedForward {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.lin1.visit(&join(prefix, "lin1"), f);
        self.lin2.visit(&join(prefix, "lin2"), f);
    }
}

/// x + MHSA(LN(x)); then + FFN(LN(.)).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

pub struct EncoderBlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ffn: FeedForwardCache,
}

impl EncoderBlock {
    pub fn new(d_model: usize, n_heads: usize, ffn_dim: usize, rng: &mut impl rand::Rng) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(d_model),
            attn: MultiHeadAttention::new(d_model, n_heads, rng),
            ln2: LayerNorm::new(d_model),
            ffn: FeedForward::new(d_model, ffn_dim, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, EncoderBlockCache)> {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&n1, &n1, false)?;
        let mid = x.add(&a);
        let (n2, ln2) = self.ln2.forward(&mid);
        let (f, ffn) = self.ffn.forward(&n2);
        let out = mid.add(&f);
        Ok((out, EncoderBlockCache { ln1, attn, ln2, ffn }))
    }

    pub fn backward(&mut self, cache: &EncoderBlockCache, dy: &Matrix) -> Matrix {
        let df = self.ffn.backward(&cache.ffn, dy);
        let mut d_mid = dy.clone();
        d_mid.add_assign(&self.ln2.backward(&cache.ln2, &df));
        let (dq, dkv) = self.attn.backward(&cache.attn, &d_mid);
        let mut dn1 = dq;
        dn1.add_assign(&dkv);
        let mut dx = d_mid;
        dx.add_assign(&self.ln1.backward(&cache.ln1, &dn1));
        dx
    }
}

impl Params for EncoderBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention to the
/// encoder output, feed-forward.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

pub struct DecoderBlockCache {
    ln1: LayerNormCache,
    self_attn: AttentionCache,
    ln2: LayerNormCache,
    cross_attn: AttentionCache,
    ln3: LayerNormCache,
    ffn: FeedForwardCache,
}

impl DecoderBlock {
    pub fn new(d_model: usize, n_heads: usize, ffn_dim: usize, rng: &mut impl rand::Rng) -> Self {
        DecoderBlock {
            ln1: LayerNorm::new(d_model),
            self_attn: MultiHeadAttention::new(d_model, n_heads, rng),
            ln2: LayerNorm::new(d_model),
            cross_attn: MultiHeadAttention::new(d_model, n_heads, rng),
            ln3: LayerNorm::new(d_model),
            ffn: FeedForward::new(d_model, ffn_dim, rng),
        }
    }

    pub fn forward(&self, x: &Matrix, memory: &Matrix) -> Result<(Matrix, DecoderBlockCache)> {
        let (n1, ln1) = self.ln1.forward(x);
        let (sa, self_attn) = self.self_attn.forward(&n1, &n1, true)?;
        let after_self = x.add(&sa);
        let (n2, ln2) = self.ln2.forward(&after_self);
        let (ca, cross_attn) = self.cross_attn.forward(&n2, memory, false)?;
        let after_cross = after_self.add(&ca);
        let (n3, ln3) = self.ln3.forward(&after_cross);
        let (f, ffn) = self.ffn.forward(&n3);
        let out = after_cross.add(&f);
        Ok((
            out,
            DecoderBlockCache {
                ln1,
                self_attn,
                ln2,
                cross_attn,
                ln3,
                ffn,
            },
        ))
    }

    /// Returns (dx, d_memory).
    pub fn backward(&mut self, cache: &DecoderBlockCache, dy: &Matrix) -> (Matrix, Matrix) {
        let df = self.ffn.backward(&cache.ffn, dy);
        let mut d_after_cross = dy.clone();
        d_after_cross.add_assign(&self.ln3.backward(&cache.ln3, &df));

        let (dn2, d_memory) = self.cross_attn.backward(&cache.cross_attn, &d_after_cross);
        let mut d_after_self = d_after_cross;
        d_after_self.add_assign(&self.ln2.backward(&cache.ln2, &dn2));

        let (dq, dkv) = self.self_attn.backward(&cache.self_attn, &d_after_self);
        let mut dn1 = dq;
        dn1.add_assign(&dkv);
        let mut dx = d_after_self;
        dx.add_assign(&self.ln1.backward(&cache.ln1, &dn1));
        (dx, d_memory)
    }
}

impl Params for DecoderBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.ln3.visit(&join(prefix, "ln3"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }
}
