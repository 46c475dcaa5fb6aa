//! Pre-layer-norm encoder-decoder transformer with hand-written reverse
//! mode, AdamW, a warmup/linear-decay schedule and the pretraining loop.

mod layers;
mod net;
mod optim;
mod params;
mod train;


use alloc::string::String;
use alloc::vec::Vec;

pub use net::{
    backward, cross_entropy, decode_hidden, encode_hidden, finite_difference_check, forward, gradients, logits_for_rows, loss,
    representations, token_embeddings, accumulate_embedding_grad, Batch, EmbedOverride, Forward, InputGrads,
    Representations, Side,
};
pub use optim::{adam_step, adam_update, lr_at, swa_average, Checkpoint, RngState, StepInfo, TrainConfig, Warmup};
pub use params::{ParamSet, TensorSpec};
pub use train::{
    mask_recovery, masked_token_baseline, pretrain, window_means, MetricsRecord, PretrainOutput, PretrainSample,
};

use crate::rng::Rng;
use params::Layout;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_positions {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every target position is padding")]
    AllPadBatch,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("config fingerprints differ")]
    FingerprintMismatch,
    #[error("a head is already attached")]
    HeadAlreadyAttached,
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("no usable training sequences")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Positional {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub activation_dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub share_all_embeddings: bool,
    pub pre_layernorm: bool,
    pub layernorm_embedding: bool,
    pub positional: Positional,
}

/// The tiny preset with `vocab_size` 0, to be filled from a vocabulary.
impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny(0)
    }
}

impl ModelConfig {
    /// 4+4 layers, d_model 256, 4 heads, FFN 1024.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            layers_enc: 4,
            layers_dec: 4,
            d_model: 256,
            heads: 4,
            d_ffn: 1024,
            dropout: 0.1,
            attention_dropout: 0.2,
            activation_dropout: 0.1,
            max_positions: 128,
            vocab_size,
            share_all_embeddings: true,
            pre_layernorm: true,
            layernorm_embedding: true,
            positional: Positional::Learned,
        }
    }

    /// 2+2 layers, d_model 16, 2 heads, FFN 32; for gradient checks.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig { layers_enc: 2, layers_dec: 2, d_model: 16, heads: 2, d_ffn: 32, ..Self::tiny(vocab_size) }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.d_ffn == 0 || self.max_positions == 0 {
            return bad("d_ffn and max_positions must be positive");
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIAL {
            return bad("vocab_size must exceed the special tokens");
        }
        for p in [self.dropout, self.attention_dropout, self.activation_dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout rates must lie in [0, 1)");
            }
        }
        if !self.pre_layernorm {
            return bad("only the pre-layer-norm arrangement is implemented");
        }
        Ok(())
    }

    /// Same architecture with every dropout rate set to zero.
    pub fn without_dropout(&self) -> Self {
        ModelConfig { dropout: 0.0, attention_dropout: 0.0, activation_dropout: 0.0, ..self.clone() }
    }

    /// Hash of the architecture fields (dropout rates excluded: they do
    /// not change parameter shapes or meaning).
    pub fn fingerprint(&self) -> u64 {
        let mut buf = Vec::new();
        for v in [self.layers_enc, self.layers_dec, self.d_model, self.heads, self.d_ffn, self.max_positions, self.vocab_size] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&[
            self.share_all_embeddings as u8,
            self.pre_layernorm as u8,
            self.layernorm_embedding as u8,
            self.positional as u8,
        ]);
        xxhash_rust::xxh3::xxh3_64(&buf)
    }
}

/// Task head on the decoder's final non-pad hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Head {
    pub outputs: usize,
    pub regression: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub head: Option<Head>,
    pub(crate) layout: Layout,
    pub(crate) pos_table: Option<Vec<f64>>,
}

impl ModelState {
    /// Freshly initialized weights: normal(0, 0.02) matrices and
    /// embeddings, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (params, layout) = params::build(cfg, Some(rng));
        Ok(Self::assemble(cfg.clone(), params, layout, None))
    }

    fn assemble(cfg: ModelConfig, params: ParamSet, layout: Layout, head: Option<Head>) -> Self {
        let pos_table = (cfg.positional == Positional::Sinusoidal).then(|| params::sinusoidal(cfg.max_positions, cfg.d_model));
        ModelState { cfg, params, head, layout, pos_table }
    }

    /// Rebuilds a state from stored tensors, checking names and shapes
    /// against the config.
    pub fn from_params(cfg: &ModelConfig, params: ParamSet, head: Option<Head>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (mut expect, layout) = params::build(cfg, None);
        if let Some(h) = head {
            push_head(&mut expect, cfg.d_model, h, None);
        }
        if expect.specs() != params.specs() {
            return Err(ModelError::ShapeMismatch("stored tensors do not match the model config".into()));
        }
        Ok(Self::assemble(cfg.clone(), params, layout, head))
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Architecture fingerprint including the head shape.
    pub fn fingerprint(&self) -> u64 {
        let base = self.cfg.fingerprint();
        match self.head {
            None => base,
            Some(h) => {
                let mut buf = base.to_le_bytes().to_vec();
                buf.extend_from_slice(&(h.outputs as u64).to_le_bytes());
                buf.push(h.regression as u8);
                xxhash_rust::xxh3::xxh3_64(&buf)
            }
        }
    }

    /// Appends a randomly initialized head. Fails if one exists.
    pub fn attach_head(&mut self, head: Head, rng: &mut Rng) -> Result<(), ModelError> {
        if self.head.is_some() {
            return Err(ModelError::HeadAlreadyAttached);
        }
        if head.outputs == 0 {
            return Err(ModelError::InvalidConfig("head needs at least one output".into()));
        }
        push_head(&mut self.params, self.cfg.d_model, head, Some(rng));
        self.head = Some(head);
        Ok(())
    }

    /// Drops the head, returning the bare pretrained model.
    pub fn without_head(&self) -> Self {
        let mut s = self.clone();
        s.params.truncate(self.layout.base_len);
        s.head = None;
        s
    }

    pub(crate) fn head_index(&self) -> Option<(usize, usize)> {
        self.head.map(|_| (self.layout.base_len, self.layout.base_len + 1))
    }

    /// Copy with separate encoder, decoder and output embedding tensors,
    /// each equal to the shared one.
    pub fn untied(&self) -> Self {
        if !self.cfg.share_all_embeddings {
            return self.clone();
        }
        let cfg = ModelConfig { share_all_embeddings: false, ..self.cfg.clone() };
        let (mut p, layout) = params::build(&cfg, None);
        let shared = self.params.t(self.layout.enc_tok).to_vec();
        // Everything after the single embedding lines up one-for-one.
        for i in 1..self.layout.base_len {
            p.t_mut(i + 2).copy_from_slice(self.params.t(i));
        }
        for i in [layout.enc_tok, layout.dec_tok, layout.out_proj] {
            p.t_mut(i).copy_from_slice(&shared);
        }
        if let Some(h) = self.head {
            push_head(&mut p, cfg.d_model, h, None);
            for k in 0..2 {
                p.t_mut(layout.base_len + k).copy_from_slice(self.params.t(self.layout.base_len + k));
            }
        }
        Self::assemble(cfg, p, layout, self.head)
    }
}

fn push_head(p: &mut ParamSet, d: usize, head: Head, rng: Option<&mut Rng>) {
    use rand_distr::{Distribution, Normal};
    let n = d * head.outputs;
    let w = match rng {
        Some(r) => {
            let normal = Normal::new(0.0, 0.02).expect("valid std");
            (0..n).map(|_| normal.sample(r)).collect()
        }
        None => alloc::vec![0.0; n],
    };
    p.push(TensorSpec { name: "head.weight".into(), shape: alloc::vec![d, head.outputs] }, w);
    p.push(TensorSpec { name: "head.bias".into(), shape: alloc::vec![head.outputs] }, alloc::vec![0.0; head.outputs]);
}
