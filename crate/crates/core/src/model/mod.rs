//! Decoder-only causal transformer with an explicit key/value cache.
//!
//! Pre-norm blocks (layer norm, attention, residual; layer norm, GELU
//! feed-forward, residual), learned absolute positions, output projection
//! tied to the token embedding. Positions continue from the cache length, so
//! feeding a sequence in several calls is the same computation as feeding it
//! at once.

mod checkpoint;
mod params;
mod scalar;
mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use checkpoint::{load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file, Checkpoint, CheckpointMeta};
pub use params::{Layout, LayerIdx, Params, TensorInfo, TensorKind};
pub use scalar::Scalar;
pub use tape::{cross_entropy, forward, forward_rows, loss_and_grads, KvCache, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

pub const DEFAULT_MAX_POSITIONS: usize = 256;

impl ModelConfig {
    /// 2 layers, 2 heads, width 64.
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            max_positions: DEFAULT_MAX_POSITIONS,
            dropout: 0.1,
        }
    }

    /// 4 layers, 4 heads, width 128.
    pub fn medium(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size,
            max_positions: DEFAULT_MAX_POSITIONS,
            dropout: 0.1,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "small" => Ok(Self::small(vocab_size)),
            "medium" => Ok(Self::medium(vocab_size)),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return bad("vocab_size and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Dropout is active only in `Train`, drawing masks from the given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}
