//! Small transformer language models with a two-way classification head.
//!
//! Two families share one implementation: a causal decoder (GPT-style, pairs
//! concatenated, pooled at the last real token) and a bidirectional encoder
//! (BERT-style, `[CLS] a [SEP] b [SEP]`, pooled at `[CLS]`). All parameters
//! live in one flat buffer; gradients are computed by hand-written reverse
//! mode and checked against finite differences in the tests.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toklab::PairMode;

mod checkpoint;
mod net;
mod params;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{Example, Target};
pub use params::{Params, TensorSpec};
pub use train::{
    accuracy_on, corpus_stream, extend_model_and_tokenizer, finetune, pretrain_mixture, CorpusMix, MixtureSampler,
    StepEvent, TrainConfig, TrainOutcome, MLM_MASK_RATE,
};

/// Floating-point element type. Tests and golden runs use `f64`; `f32` is
/// the opt-in speed mode.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("input is all padding")]
    AllPadding,
    #[error("empty batch or dataset")]
    Empty,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("training diverged at step {step}")]
    DivergedLoss { step: usize },
    #[error("token {0:?} already in vocabulary")]
    DuplicateToken(String),
    #[error("tokenizer has {tokenizer} entries but model vocabulary is {model}")]
    VocabMismatch { tokenizer: usize, model: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Arch {
    DecoderCausal,
    EncoderBidir,
}

impl Arch {
    pub fn pair_mode(self) -> PairMode {
        match self {
            Arch::DecoderCausal => PairMode::DecoderConcat,
            Arch::EncoderBidir => PairMode::EncoderSep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// d 128, 4 layers, 4 heads, d_ff 512, 128 positions, dropout 0.1.
    pub fn new(arch: Arch, vocab_size: usize) -> Self {
        ModelConfig {
            arch,
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 128,
            dropout: 0.1,
        }
    }

    /// Preset for quick runs: d 64, 2 layers, 4 heads, d_ff 128, 64
    /// positions, no dropout.
    pub fn tiny(arch: Arch, vocab_size: usize) -> Self {
        ModelConfig { arch, vocab_size, d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, max_seq_len: 64, dropout: 0.0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if self.vocab_size < 5 {
            return bad("vocab_size must be at least 5");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers and d_ff must be positive");
        }
        if self.max_seq_len < 8 {
            return bad("max_seq_len must be at least 8");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Numerically stable softmax of a logit row.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the larger logit; ties go to label 0.
pub fn argmax2<S: Scalar>(logits: [S; 2]) -> u8 {
    u8::from(logits[1] > logits[0])
}
