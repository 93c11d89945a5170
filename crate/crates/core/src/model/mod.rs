//! Toy transformer encoder/decoder with a CTC head, teacher-forced attention
//! decoder and per-block adapter injection points.

pub mod attention;
pub mod blocks;
pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AccentEmbedding, AdapterSpec, AdapterStack, CoefficientVector, UnitCache};
use crate::adapters::PredictorCache;
use crate::error::{Error, Result};
use crate::losses::{BLANK, EOS};
use crate::numerics::layers::{log_softmax_backward, Embedding, EmbeddingCache, LayerNorm, LayerNormCache, Linear, LinearCache};
use crate::numerics::matrix::{row_log_softmax, Matrix};
use crate::numerics::param::{join, Parameter, Params};

use blocks::{DecoderBlock, DecoderBlockCache, EncoderBlock, EncoderBlockCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input feature dimension per frame.
    pub feat_dim: usize,
    /// Attention dimension (reference scale 512, toy default 16).
    pub d_model: usize,
    /// Attention heads (reference 8, toy default 2).
    pub n_heads: usize,
    /// Encoder blocks (reference 12, toy default 4).
    pub enc_layers: usize,
    /// Decoder blocks (reference 6, toy default 2).
    pub dec_layers: usize,
    pub ffn_dim: usize,
    /// Includes blank (id 0) and eos (id 1).
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "default_true")]
    pub use_positional_encoding: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn toy(feat_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            feat_dim,
            d_model: 16,
            n_heads: 2,
            enc_layers: 4,
            dec_layers: 2,
            ffn_dim: 32,
            vocab_size,
            max_len: 12,
            use_positional_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must be >= 3 (blank, eos, content)".into()));
        }
        if self.feat_dim < 1 || self.enc_layers < 1 || self.dec_layers < 1 || self.max_len < 1 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-frame and per-step log-probabilities produced by one forward pass.
pub struct ModelOutput {
    /// T x vocab_size.
    pub ctc_log_probs: Matrix,
    /// (len(targets)+1) x vocab_size under teacher forcing.
    pub s2s_log_probs: Matrix,
    /// Interpolation coefficients, when a predictor-bearing adapter is attached.
    pub alpha: Option<CoefficientVector>,
}

/// Encoder intermediates: per-block inputs h^i and the final representation h.
pub struct EncoderState {
    pub block_inputs: Vec<Matrix>,
    pub final_output: Matrix,
}

pub struct ModelCache {
    input: LinearCache,
    adapter_units: Vec<Option<UnitCache>>,
    enc_blocks: Vec<EncoderBlockCache>,
    enc_ln: LayerNormCache,
    ctc_head: LinearCache,
    ctc_log_probs: Matrix,
    dec_embed: EmbeddingCache,
    dec_blocks: Vec<DecoderBlockCache>,
    dec_ln: LayerNormCache,
    dec_head: LinearCache,
    s2s_log_probs: Matrix,
    predictor: Option<PredictorCache>,
}

/// Sinusoidal positional encoding (no parameters).
pub fn positional_encoding(t_len: usize, d_model: usize) -> Matrix {
    let mut pe = Matrix::zeros(t_len, d_model);
    for pos in 0..t_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe.set(pos, 2 * i, angle.sin());
            pe.set(pos, 2 * i + 1, angle.cos());
        }
        if d_model % 2 == 1 {
            let i = d_model / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe.set(pos, d_model - 1, angle.sin());
        }
    }
    pe
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub input_proj: Linear,
    pub enc_blocks: Vec<EncoderBlock>,
    pub enc_ln: LayerNorm,
    pub ctc_head: Linear,
    pub dec_embed: Embedding,
    pub dec_blocks: Vec<DecoderBlock>,
    pub dec_ln: LayerNorm,
    pub dec_head: Linear,
    pub adapter: Option<AdapterStack>,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Model {
            input_proj: Linear::xavier(config.feat_dim, d, rng),
            enc_blocks: (0..config.enc_layers)
                .map(|_| EncoderBlock::new(d, config.n_heads, config.ffn_dim, rng))
                .collect(),
            enc_ln: LayerNorm::new(d),
            ctc_head: Linear::xavier(d, config.vocab_size, rng),
            dec_embed: Embedding::xavier(config.vocab_size, d, rng),
            dec_blocks: (0..config.dec_layers)
                .map(|_| DecoderBlock::new(d, config.n_heads, config.ffn_dim, rng))
                .collect(),
            dec_ln: LayerNorm::new(d),
            dec_head: Linear::xavier(d, config.vocab_size, rng),
            adapter: None,
            config,
        })
    }

    /// Attaches freshly initialized adapters without touching baseline
    /// parameters. Zero-initialized up-projections and gated layers keep the
    /// model's outputs bit-identical to the adapter-free model.
    pub fn inject_adapters(&mut self, mut spec: AdapterSpec, rng: &mut impl Rng) -> Result<()> {
        if spec.mode == crate::adapters::AdapterMode::None {
            self.adapter = None;
            return Ok(());
        }
        if spec.bottleneck == 0 {
            spec.bottleneck = crate::adapters::default_bottleneck(self.config.d_model);
        }
        let stack = AdapterStack::new(spec, self.config.d_model, self.config.enc_layers, rng)?;
        self.adapter = Some(stack);
        Ok(())
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    fn validate_inputs(&self, features: &Matrix, targets: &[usize], z: Option<&AccentEmbedding>) -> Result<()> {
        if features.rows() == 0 || features.data().is_empty() {
            return Err(Error::Input("empty feature sequence".into()));
        }
        if features.cols() != self.config.feat_dim {
            return Err(Error::Dimension(format!(
                "features have {} columns, expected {}",
                features.cols(),
                self.config.feat_dim
            )));
        }
        if targets.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "target length {} exceeds max_len {}",
                targets.len(),
                self.config.max_len
            )));
        }
        if targets.iter().any(|&t| t == BLANK) {
            return Err(Error::Input("targets must not contain the blank id".into()));
        }
        if targets.iter().any(|&t| t == EOS || t >= self.config.vocab_size) {
            return Err(Error::Input("targets must be content token ids".into()));
        }
        if self.adapter.is_some() && z.is_none() {
            return Err(Error::Config("adapter attached but no accent embedding given".into()));
        }
        Ok(())
    }

    /// Full teacher-forced forward pass.
    pub fn forward(
        &self,
        features: &Matrix,
        targets: &[usize],
        z: Option<&AccentEmbedding>,
    ) -> Result<(ModelOutput, EncoderState, ModelCache)> {
        self.validate_inputs(features, targets, z)?;

        // coefficient prediction, once per utterance
        let (alpha, predictor_cache) = match (&self.adapter, z) {
            (Some(stack), Some(z)) => match stack.predict(z)? {
                Some((a, c)) => (Some(a), Some(c)),
                None => (None, None),
            },
            _ => (None, None),
        };

        // encoder
        let (proj, input_cache) = self.input_proj.forward(features);
        let mut h = if self.config.use_positional_encoding {
            proj.add(&positional_encoding(proj.rows(), self.config.d_model))
        } else {
            proj
        };
        let mut block_inputs = Vec::with_capacity(self.config.enc_layers);
        let mut adapter_units = Vec::with_capacity(self.config.enc_layers);
        let mut enc_caches = Vec::with_capacity(self.config.enc_layers);
        for (i, block) in self.enc_blocks.iter().enumerate() {
            block_inputs.push(h.clone());
            let mut unit_cache = None;
            if let (Some(stack), Some(z)) = (&self.adapter, z) {
                if let Some(idx) = stack.unit_at(i) {
                    let (contrib, cache) = stack.units[idx].1.forward(&h, z, alpha.as_ref())?;
                    h = h.add(&contrib);
                    unit_cache = Some(cache);
                }
            }
            adapter_units.push(unit_cache);
            let (out, cache) = block.forward(&h)?;
            enc_caches.push(cache);
            h = out;
        }
        let (enc_out, enc_ln_cache) = self.enc_ln.forward(&h);

        // CTC head
        let (ctc_logits, ctc_head_cache) = self.ctc_head.forward(&enc_out);
        let ctc_log_probs = row_log_softmax(&ctc_logits);

        // decoder, teacher forced on [eos, t_1, ..., t_L]
        let mut dec_input = Vec::with_capacity(targets.len() + 1);
        dec_input.push(EOS);
        dec_input.extend_from_slice(targets);
        let (emb, dec_embed_cache) = self.dec_embed.forward(&dec_input);
        let mut d = if self.config.use_positional_encoding {
            emb.add(&positional_encoding(emb.rows(), self.config.d_model))
        } else {
            emb
        };
        let mut dec_caches = Vec::with_capacity(self.config.dec_layers);
        for block in &self.dec_blocks {
            let (out, cache) = block.forward(&d, &enc_out)?;
            dec_caches.push(cache);
            d = out;
        }
        let (dec_out, dec_ln_cache) = self.dec_ln.forward(&d);
        let (s2s_logits, dec_head_cache) = self.dec_head.forward(&dec_out);
        let s2s_log_probs = row_log_softmax(&s2s_logits);

        let output = ModelOutput {
            ctc_log_probs: ctc_log_probs.clone(),
            s2s_log_probs: s2s_log_probs.clone(),
            alpha: alpha.clone(),
        };
        let state = EncoderState {
            block_inputs,
            final_output: enc_out,
        };
        let cache = ModelCache {
            input: input_cache,
            adapter_units,
            enc_blocks: enc_caches,
            enc_ln: enc_ln_cache,
            ctc_head: ctc_head_cache,
            ctc_log_probs,
            dec_embed: dec_embed_cache,
            dec_blocks: dec_caches,
            dec_ln: dec_ln_cache,
            dec_head: dec_head_cache,
            s2s_log_probs,
            predictor: predictor_cache,
        };
        Ok((output, state, cache))
    }

    /// Accumulates gradients for one utterance. `d_ctc_logp` and `d_s2s_logp`
    /// are upstream gradients with respect to the two log-prob outputs;
    /// `d_alpha_extra` carries the coefficient-MSE contribution.
    pub fn backward(
        &mut self,
        cache: &ModelCache,
        d_ctc_logp: &Matrix,
        d_s2s_logp: &Matrix,
        d_alpha_extra: Option<&[f64]>,
    ) {
        // decoder side
        let d_s2s_logits = log_softmax_backward(&cache.s2s_log_probs, d_s2s_logp);
        let d_dec_out = self.dec_head.backward(&cache.dec_head, &d_s2s_logits);
        let mut d_dec = self.dec_ln.backward(&cache.dec_ln, &d_dec_out);
        let t_enc = cache.ctc_log_probs.rows();
        let mut d_memory_total = Matrix::zeros(t_enc, self.config.d_model);
        for (block, bcache) in self.dec_blocks.iter_mut().zip(&cache.dec_blocks).rev() {
            let (dx, d_mem) = block.backward(bcache, &d_dec);
            d_dec = dx;
            d_memory_total.add_assign(&d_mem);
        }
        self.dec_embed.backward(&cache.dec_embed, &d_dec);

        // CTC side
        let d_ctc_logits = log_softmax_backward(&cache.ctc_log_probs, d_ctc_logp);
        let d_enc_out_ctc = self.ctc_head.backward(&cache.ctc_head, &d_ctc_logits);
        d_memory_total.add_assign(&d_enc_out_ctc);

        // encoder stack
        let mut dh = self.enc_ln.backward(&cache.enc_ln, &d_memory_total);
        let mut d_alpha_total: Option<Vec<f64>> = None;
        for i in (0..self.enc_blocks.len()).rev() {
            dh = self.enc_blocks[i].backward(&cache.enc_blocks[i], &dh);
            if let Some(unit_cache) = &cache.adapter_units[i] {
                let stack = self.adapter.as_mut().expect("adapter cache without stack");
                let idx = stack.unit_at(i).expect("adapter cache without unit");
                let (d_contrib_input, dalpha) = stack.units[idx].1.backward(unit_cache, &dh);
                // block input = h_in + contribution(h_in)
                dh.add_assign(&d_contrib_input);
                if !dalpha.is_empty() {
                    match d_alpha_total.as_mut() {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&dalpha) {
                                *a += b;
                            }
                        }
                        None => d_alpha_total = Some(dalpha),
                    }
                }
            }
        }
        self.input_proj.backward(&cache.input, &dh);

        // predictor
        if let (Some(stack), Some(pcache)) = (self.adapter.as_mut(), cache.predictor.as_ref()) {
            let n = stack.spec.n_bases;
            let mut d_alpha = d_alpha_total.unwrap_or_else(|| vec![0.0; n]);
            if let Some(extra) = d_alpha_extra {
                for (a, b) in d_alpha.iter_mut().zip(extra) {
                    *a += b;
                }
            }
            if let Some(p) = stack.predictor.as_mut() {
                p.backward(pcache, &d_alpha);
            }
        }
    }

    /// Encoder-only pass for decoding (no caches retained).
    pub fn encode(&self, features: &Matrix, z: Option<&AccentEmbedding>) -> Result<(Matrix, Option<CoefficientVector>)> {
        self.validate_inputs(features, &[], z)?;
        let alpha = match (&self.adapter, z) {
            (Some(stack), Some(z)) => stack.predict(z)?.map(|(a, _)| a),
            _ => None,
        };
        let (proj, _) = self.input_proj.forward(features);
        let mut h = if self.config.use_positional_encoding {
            proj.add(&positional_encoding(proj.rows(), self.config.d_model))
        } else {
            proj
        };
        for (i, block) in self.enc_blocks.iter().enumerate() {
            if let (Some(stack), Some(z)) = (&self.adapter, z) {
                if let Some(idx) = stack.unit_at(i) {
                    let (contrib, _) = stack.units[idx].1.forward(&h, z, alpha.as_ref())?;
                    h = h.add(&contrib);
                }
            }
            let (out, _) = block.forward(&h)?;
            h = out;
        }
        let (enc_out, _) = self.enc_ln.forward(&h);
        Ok((enc_out, alpha))
    }

    /// CTC frame log-probabilities from an encoded representation.
    pub fn ctc_log_probs(&self, enc_out: &Matrix) -> Matrix {
        let (logits, _) = self.ctc_head.forward(enc_out);
        row_log_softmax(&logits)
    }

    /// Teacher-forced decoder log-probabilities for a token prefix. The input
    /// is [eos, prefix...]; row j gives the distribution over the (j+1)-th
    /// output token.
    pub fn decoder_log_probs(&self, enc_out: &Matrix, prefix: &[usize]) -> Result<Matrix> {
        let mut dec_input = Vec::with_capacity(prefix.len() + 1);
        dec_input.push(EOS);
        dec_input.extend_from_slice(prefix);
        let (emb, _) = self.dec_embed.forward(&dec_input);
        let mut d = if self.config.use_positional_encoding {
            emb.add(&positional_encoding(emb.rows(), self.config.d_model))
        } else {
            emb
        };
        for block in &self.dec_blocks {
            let (out, _) = block.forward(&d, enc_out)?;
            d = out;
        }
        let (dec_out, _) = self.dec_ln.forward(&d);
        let (logits, _) = self.dec_head.forward(&dec_out);
        Ok(row_log_softmax(&logits))
    }
}

impl Params for Model {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.input_proj.visit(&join(prefix, "input"), f);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("enc{i}")), f);
        }
        self.enc_ln.visit(&join(prefix, "enc_ln"), f);
        self.ctc_head.visit(&join(prefix, "ctc_head"), f);
        self.dec_embed.visit(&join(prefix, "dec_embed"), f);
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("dec{i}")), f);
        }
        self.dec_ln.visit(&join(prefix, "dec_ln"), f);
        self.dec_head.visit(&join(prefix, "dec_head"), f);
        if let Some(stack) = self.adapter.as_mut() {
            stack.visit(&join(prefix, "adapter"), f);
        }
    }
}
