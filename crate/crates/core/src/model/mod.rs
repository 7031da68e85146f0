//! Transformer encoder-decoder with hand-written backpropagation.
//!
//! Everything operates on one example at a time (`seq_len x model_dim`
//! matrices); a batch is a list of examples whose gradients are accumulated
//! before one optimizer update. Parameters are generic over [`Real`] so the
//! same code trains in `f32` and gradient-checks in `f64`.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::VOCAB_SIZE;

pub mod checkpoint;
pub mod decode;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod params;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use decode::IncrementalDecoder;
pub use gradcheck::{gradient_check, jitter, GradCheckReport};
pub use network::{cross_entropy, forward, ForwardCache};
pub use params::ModelParams;
pub use train::{Adam, EncodedExample, Trainer, TrainLogLine};

pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder layers; the decoder has the same number.
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub max_encoder_len: usize,
    pub max_decoder_len: usize,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    /// Layer norm before each sublayer (true) or after the residual add.
    #[serde(default = "default_pre_norm")]
    pub pre_norm: bool,
}

fn default_pre_norm() -> bool {
    true
}

impl ModelConfig {
    /// Small enough to train on one CPU core in minutes.
    pub fn toy() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            feedforward_dim: 256,
            max_encoder_len: 1024,
            max_decoder_len: 1024,
            dropout_rate: 0.1,
            vocab_size: VOCAB_SIZE,
            pre_norm: true,
        }
    }

    /// Four layers, eight heads, width 512.
    pub fn full() -> Self {
        Self {
            num_layers: 4,
            num_heads: 8,
            model_dim: 512,
            feedforward_dim: 2048,
            ..Self::toy()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 || self.feedforward_dim == 0 {
            return bad("layer, head and width counts must be positive");
        }
        if self.model_dim % self.num_heads != 0 {
            return bad("model_dim must be divisible by num_heads");
        }
        if self.max_encoder_len == 0 || self.max_decoder_len == 0 {
            return bad("maximum lengths must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(ModelError::VocabMismatch {
                expected: VOCAB_SIZE,
                found: self.vocab_size,
            });
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    /// Train/valid/test shares.
    pub split: [f64; 3],
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            pretrain_epochs: 2,
            finetune_epochs: 2,
            seed: 0,
            split: [0.8, 0.1, 0.1],
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.split.iter().any(|&s| s < 0.0) {
            return Err(ModelError::Config("split ratios must be nonnegative and sum to 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint vocabulary size {found} does not match {expected}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("{what} length {len} outside 1..={max}")]
    Length { what: &'static str, len: usize, max: usize },
    #[error("{what}: {a} vs {b}")]
    Shape { what: &'static str, a: usize, b: usize },
    #[error("token id {0} outside the vocabulary")]
    TokenId(u32),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
