use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Target,
    Draft,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub role: Role,
}

impl ModelConfig {
    /// 4 layers, d = 96, m = 256, 4 heads.
    pub fn target_default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 96,
            ffn_dim: 256,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 128,
            role: Role::Target,
        }
    }

    /// 2 layers, d = 96, m = 192, 4 heads; roughly a third of the target's FLOPs.
    pub fn draft_default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 96,
            ffn_dim: 192,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            role: Role::Draft,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Draft and target must share the vocabulary and the hidden width.
    pub fn check_pair(target: &ModelConfig, draft: &ModelConfig) -> Result<()> {
        if target.vocab_size != draft.vocab_size || target.model_dim != draft.model_dim {
            return Err(Error::Config(format!(
                "draft (|V|={}, d={}) and target (|V|={}, d={}) must agree on vocabulary and width",
                draft.vocab_size, draft.model_dim, target.vocab_size, target.model_dim
            )));
        }
        Ok(())
    }
}
