use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueCombiner {
    Bilstm,
    Mlp,
    Sum,
}

impl fmt::Display for ValueCombiner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueCombiner::Bilstm => "bilstm",
            ValueCombiner::Mlp => "mlp",
            ValueCombiner::Sum => "sum",
        })
    }
}

impl FromStr for ValueCombiner {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bilstm" => Ok(ValueCombiner::Bilstm),
            "mlp" => Ok(ValueCombiner::Mlp),
            "sum" => Ok(ValueCombiner::Sum),
            other => Err(ConfigError::UnknownCombiner(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_func: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub alpha: f64,
    pub value_combiner: ValueCombiner,
    pub max_len: usize,
    /// Width of the per-byte embedding inside the value encoder.
    pub byte_emb: usize,
    /// Hidden width of each LSTM direction.
    pub lstm_hidden: usize,
    /// Operand positions at or beyond this share one embedding row.
    pub max_operands: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown preset {0:?} (expected desk, full or tiny)")]
    UnknownPreset(String),
    #[error("unknown value combiner {0:?}")]
    UnknownCombiner(String),
    #[error("d_emb {d_emb} is not divisible by {heads} heads")]
    Heads { d_emb: usize, heads: usize },
    #[error("d_func {d_func} exceeds d_emb {d_emb}")]
    FuncWidth { d_func: usize, d_emb: usize },
    #[error("alpha must be positive")]
    Alpha,
}

impl ModelConfig {
    pub fn desk() -> ModelConfig {
        ModelConfig {
            d_emb: 64,
            d_func: 32,
            layers: 2,
            heads: 2,
            ffn: 128,
            dropout: 0.1,
            alpha: 0.125,
            value_combiner: ValueCombiner::Bilstm,
            max_len: 128,
            byte_emb: 16,
            lstm_hidden: 16,
            max_operands: 16,
        }
    }

    pub fn full() -> ModelConfig {
        ModelConfig {
            d_emb: 768,
            d_func: 768,
            layers: 12,
            heads: 8,
            ffn: 3072,
            max_len: 512,
            byte_emb: 64,
            lstm_hidden: 128,
            ..ModelConfig::desk()
        }
    }

    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            d_emb: 8,
            d_func: 4,
            layers: 1,
            heads: 2,
            ffn: 12,
            dropout: 0.0,
            max_len: 16,
            byte_emb: 3,
            lstm_hidden: 3,
            max_operands: 8,
            ..ModelConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<ModelConfig, ConfigError> {
        match name {
            "desk" => Ok(ModelConfig::desk()),
            "full" => Ok(ModelConfig::full()),
            "tiny" => Ok(ModelConfig::tiny()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.heads == 0 || !self.d_emb.is_multiple_of(self.heads) {
            return Err(ConfigError::Heads {
                d_emb: self.d_emb,
                heads: self.heads,
            });
        }
        if self.d_func > self.d_emb {
            return Err(ConfigError::FuncWidth {
                d_func: self.d_func,
                d_emb: self.d_emb,
            });
        }
        if self.alpha <= 0.0 || !self.alpha.is_finite() {
            return Err(ConfigError::Alpha);
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.heads
    }
}
