//! Encoder-decoder transformer with a hand-written reverse pass.

mod checkpoint;
mod forward;
mod incremental;
mod ops;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use forward::{backward, backward_into, forward, ForwardOutput, Mode, TargetWeights};
pub use incremental::{DecoderState, EncoderMemory, TransformerDecoder};
pub use params::{
    AttnIds, DecLayerIds, EncLayerIds, FfnIds, Gradients, Layout, NormIds, Params, TensorId,
    TensorKind, TensorSpec,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("activation cache is stale or missing: {0}")]
    StaleActivations(&'static str),
    #[error("negative perturbation scale {0}")]
    NegativeSigma(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return fail("d_model, d_ff and n_heads must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return fail("vocab_size and max_len must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
