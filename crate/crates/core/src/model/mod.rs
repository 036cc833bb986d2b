//! Target and draft transformers, the shared/private gated feed-forward
//! block, freezing and checkpoints.

mod checkpoint;
mod config;
mod transformer;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_draft, load_target, save_draft, save_target, CheckpointHeader, CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, Role};
pub use transformer::{
    gated_ffn_forward, gated_ffn_with_gates, AttentionParams, Block, ExpertParams, FeedForward,
    ForwardOutput, GatedExpertBlock, TapeForward, Transformer,
};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, Matrix, ParamStore};

/// Anything that maps a token prefix to next-token logits at every position.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// `L × |V|` logits; row `t` conditions on `tokens[..=t]`.
    fn logits(&self, tokens: &[TokenId]) -> Result<Matrix>;
}

macro_rules! model_wrapper {
    ($name:ident, $role:expr) => {
        #[derive(Clone, Debug)]
        pub struct $name(Transformer);

        impl $name {
            pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
                Self::from_transformer(Transformer::new(config, seed)?)
            }

            pub fn from_transformer(net: Transformer) -> Result<Self> {
                if net.config().role != $role {
                    return Err(Error::Config(format!(
                        "expected a {:?} model, got {:?}",
                        $role,
                        net.config().role
                    )));
                }
                Ok(Self(net))
            }

            pub fn net(&self) -> &Transformer {
                &self.0
            }

            pub fn net_mut(&mut self) -> &mut Transformer {
                &mut self.0
            }

            pub fn config(&self) -> &ModelConfig {
                self.0.config()
            }

            pub fn params(&self) -> &ParamStore {
                self.0.params()
            }

            pub fn params_mut(&mut self) -> &mut ParamStore {
                self.0.params_mut()
            }

            pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardOutput> {
                self.0.forward(tokens)
            }

            pub fn forward_calls(&self) -> u64 {
                self.0.forward_calls()
            }
        }

        impl LanguageModel for $name {
            fn vocab_size(&self) -> usize {
                self.config().vocab_size
            }

            fn max_seq_len(&self) -> usize {
                self.config().max_seq_len
            }

            fn logits(&self, tokens: &[TokenId]) -> Result<Matrix> {
                Ok(self.forward(tokens)?.logits)
            }
        }
    };
}

model_wrapper!(TargetModel, Role::Target);
model_wrapper!(DraftModel, Role::Draft);

/// Same logits at every position; the weakest possible drafter.
#[derive(Clone, Debug)]
pub struct UniformModel {
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl LanguageModel for UniformModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Matrix> {
        if tokens.is_empty() || tokens.len() > self.max_seq_len {
            return Err(Error::Length(format!("{} tokens", tokens.len())));
        }
        Ok(Matrix::zeros(tokens.len(), self.vocab_size))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `softmax(logits / T)`, or the one-hot argmax row at `T = 0`.
pub fn token_distribution(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let mut p = vec![0.0; logits.len()];
        p[argmax(logits)] = 1.0;
        return p;
    }
    let mut p: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    softmax_in_place(&mut p);
    p
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_from<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Greedy at `T = 0`, otherwise a draw from `softmax(logits / T)`.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> TokenId {
    if temperature == 0.0 {
        return argmax(logits) as TokenId;
    }
    sample_from(&token_distribution(logits, temperature), rng) as TokenId
}

/// Gated draft whose behaviour starts exactly at `pretrained`.
pub fn build_gated_draft_from_pretrained(pretrained: &DraftModel) -> Result<DraftModel> {
    DraftModel::from_transformer(pretrained.net().to_gated()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Only private experts and routing vectors train.
    Eda,
    FullFt,
    None,
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eda" => Ok(FreezeMode::Eda),
            "full_ft" | "full-ft" => Ok(FreezeMode::FullFt),
            "none" => Ok(FreezeMode::None),
            other => Err(Error::Usage(format!("unknown adaptation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn all(params: &ParamStore, trainable: bool) -> Self {
        Self {
            trainable: vec![trainable; params.len()],
        }
    }

    pub fn flags(&self) -> &[bool] {
        &self.trainable
    }

    /// Trainable scalars over all scalars.
    pub fn trainable_fraction(&self, params: &ParamStore) -> f64 {
        self.trainable_count(params) as f64 / params.scalar_count() as f64
    }

    pub fn trainable_count(&self, params: &ParamStore) -> usize {
        params
            .iter()
            .filter(|(id, _, _)| self.trainable[id.index()])
            .map(|(_, _, m)| m.len())
            .sum()
    }
}

pub fn make_freeze_mask(model: &DraftModel, mode: FreezeMode) -> Result<FreezeMask> {
    let params = model.params();
    match mode {
        FreezeMode::FullFt => Ok(FreezeMask::all(params, true)),
        FreezeMode::None => Ok(FreezeMask::all(params, false)),
        FreezeMode::Eda => {
            if !model.net().is_gated() {
                return Err(Error::Config(
                    "eda freezing needs a draft with gated feed-forward blocks".into(),
                ));
            }
            let mut mask = FreezeMask::all(params, false);
            for b in model.net().blocks() {
                if let FeedForward::Gated(g) = b.ffn {
                    for id in [g.private.down, g.private.up, g.route_shared, g.route_private] {
                        mask.trainable[id.index()] = true;
                    }
                }
            }
            Ok(mask)
        }
    }
}

#[cfg(test)]
mod tests;
