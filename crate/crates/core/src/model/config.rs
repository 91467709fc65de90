use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::PositionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Alibi,
    Rope,
}

impl PositionEncoding {
    /// The memory placement rule that goes with this encoding.
    pub fn memory_mode(self) -> PositionMode {
        match self {
            PositionEncoding::Alibi => PositionMode::AlibiOffset,
            PositionEncoding::Rope => PositionMode::RopeUnrotated,
        }
    }

    pub(crate) fn to_u8(self) -> u8 {
        match self {
            PositionEncoding::Alibi => 0,
            PositionEncoding::Rope => 1,
        }
    }

    pub(crate) fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(PositionEncoding::Alibi),
            1 => Some(PositionEncoding::Rope),
            _ => None,
        }
    }
}

fn default_rope_base() -> f32 {
    10_000.0
}

fn default_alibi_max_bias() -> f32 {
    8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    /// Context length used during training (`N`).
    pub max_train_len: usize,
    pub position_encoding: PositionEncoding,
    pub ffn_mult: f32,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_alibi_max_bias")]
    pub alibi_max_bias: f32,
}

impl ModelConfig {
    /// Toy defaults: 3 layers, 2 heads of width 32, 64-token training context.
    pub fn toy(vocab_size: usize, position_encoding: PositionEncoding) -> Self {
        Self {
            n_layers: 3,
            n_heads: 2,
            head_dim: 32,
            vocab_size,
            max_train_len: 64,
            position_encoding,
            ffn_mult: 2.0,
            rope_base: default_rope_base(),
            alibi_max_bias: default_alibi_max_bias(),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn ffn_dim(&self) -> usize {
        ((self.model_dim() as f32) * self.ffn_mult).round().max(1.0) as usize
    }

    /// Longest input the model is expected to handle in one window: twice the
    /// training length.
    pub fn comprehensible_window(&self) -> usize {
        2 * self.max_train_len
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("max_train_len", self.max_train_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.position_encoding == PositionEncoding::Rope && !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config("rotary models need an even head_dim".into()));
        }
        if !(self.ffn_mult > 0.0) || !self.ffn_mult.is_finite() {
            return Err(Error::Config(format!("ffn_mult must be > 0, got {}", self.ffn_mult)));
        }
        if !(self.rope_base > 1.0) || !(self.alibi_max_bias > 0.0) {
            return Err(Error::Config("rope_base must be > 1 and alibi_max_bias > 0".into()));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size must fit in u32".into()));
        }
        Ok(())
    }
}
