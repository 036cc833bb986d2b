use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Generator;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Role};
use crate::nn::rng::derive_named_seed;
use crate::select::{SelectConfig, Strategy};
use crate::train::{SelfGenConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub base: usize,
    pub domain: usize,
    pub eval: usize,
    /// Base-text prompts completed by the fine-tuned target to form the
    /// general reference set for scoring.
    pub general: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub temperatures: Vec<f64>,
    /// Prompts are revisited with fresh seeds until this many complete rounds.
    pub min_rounds: usize,
    pub max_new_tokens: usize,
    pub draft_cost_ratio: f64,
    /// Cell used for the base-versus-domain pairing comparison.
    pub transfer_k: usize,
    pub transfer_temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub k: usize,
    pub temperature: f64,
}

/// Everything a run depends on. Every stage derives its randomness from
/// `seed` and its own name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub domain: Generator,
    pub sizes: CorpusSizes,
    pub target: ModelConfig,
    pub draft: ModelConfig,
    pub train_target: TrainConfig,
    pub finetune_target: TrainConfig,
    pub pretrain_draft: TrainConfig,
    pub adapt: TrainConfig,
    pub selfgen: SelfGenConfig,
    pub select: SelectConfig,
    /// Share of the self-generated set kept for the selected adaptation.
    pub budget_fraction: f64,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

pub const PRESETS: [&str; 3] = ["math-transfer", "code-transfer", "smoke"];

fn desk_train(learning_rate: f64) -> TrainConfig {
    TrainConfig {
        learning_rate,
        ..TrainConfig::default()
    }
}

impl Manifest {
    /// Named configurations. The desk presets keep batch size and epochs at
    /// their defaults but raise the learning rate: at this scale the default
    /// rate barely moves the weights within 20 epochs.
    pub fn preset(name: &str) -> Result<Self> {
        let domain = match name {
            "math-transfer" => Generator::Arithmetic,
            "code-transfer" => Generator::BracketCode,
            "smoke" => return Ok(Self::smoke()),
            other => {
                return Err(Error::Usage(format!(
                    "unknown preset {other:?} (valid: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            seed: 20_240_601,
            domain,
            sizes: CorpusSizes {
                base: 8000,
                domain: 4000,
                eval: 500,
                general: 500,
            },
            target: ModelConfig::target_default(),
            draft: ModelConfig::draft_default(),
            train_target: desk_train(1e-3),
            finetune_target: desk_train(1e-3),
            pretrain_draft: desk_train(1e-3),
            adapt: desk_train(3e-3),
            selfgen: SelfGenConfig::default(),
            select: SelectConfig::default(),
            budget_fraction: 0.5,
            eval: EvalConfig {
                ks: vec![3, 5],
                temperatures: vec![0.0, 1.0],
                min_rounds: 500,
                max_new_tokens: 32,
                draft_cost_ratio: 0.5,
                transfer_k: 5,
                transfer_temperature: 0.0,
            },
            sweep: SweepConfig {
                fractions: vec![0.25, 0.5, 0.75, 1.0],
                strategies: Strategy::ALL.to_vec(),
                k: 5,
                temperature: 0.0,
            },
        })
    }

    /// A seconds-long end-to-end run on toy models.
    fn smoke() -> Self {
        let tiny = |role| ModelConfig {
            vocab_size: 64,
            model_dim: 16,
            ffn_dim: 24,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 64,
            role,
        };
        let quick = TrainConfig {
            batch_size: 8,
            learning_rate: 3e-3,
            epochs: 2,
            ..TrainConfig::default()
        };
        let mut m = Self::preset("math-transfer").expect("known preset");
        m.name = "smoke".into();
        m.sizes = CorpusSizes {
            base: 48,
            domain: 24,
            eval: 6,
            general: 12,
        };
        m.target = tiny(Role::Target);
        m.draft = tiny(Role::Draft);
        m.train_target = quick.clone();
        m.finetune_target = quick.clone();
        m.pretrain_draft = quick.clone();
        m.adapt = quick;
        m.selfgen.max_completion_len = 8;
        m.select.pca_dim = 4;
        m.eval.ks = vec![2];
        m.eval.min_rounds = 10;
        m.eval.max_new_tokens = 8;
        m.eval.transfer_k = 2;
        m.sweep.k = 2;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        self.draft.validate()?;
        ModelConfig::check_pair(&self.target, &self.draft)?;
        for cfg in [&self.train_target, &self.finetune_target, &self.pretrain_draft, &self.adapt] {
            cfg.validate()?;
        }
        let s = &self.sizes;
        if [s.base, s.domain, s.eval, s.general].contains(&0) {
            return Err(Error::Config("corpus sizes must be at least 1".into()));
        }
        if self.domain == Generator::BaseText {
            return Err(Error::Config("the domain must be arithmetic or bracket_code".into()));
        }
        if !self.selfgen.record_hiddens {
            return Err(Error::Config("scoring needs recorded hidden states".into()));
        }
        let fraction_ok = |f: f64| f > 0.0 && f <= 1.0;
        if !fraction_ok(self.budget_fraction) || !self.sweep.fractions.iter().all(|&f| fraction_ok(f)) {
            return Err(Error::Config("budget fractions must lie in (0, 1]".into()));
        }
        let e = &self.eval;
        if e.ks.is_empty() || e.temperatures.is_empty() || e.ks.contains(&0) {
            return Err(Error::Config("evaluation grid needs K ≥ 1 and a temperature".into()));
        }
        let temps_ok = e
            .temperatures
            .iter()
            .chain([&e.transfer_temperature, &self.sweep.temperature])
            .all(|t| *t >= 0.0 && t.is_finite());
        if !temps_ok || !(e.draft_cost_ratio >= 0.0) || e.transfer_k == 0 || self.sweep.k == 0 {
            return Err(Error::Config("evaluation settings out of range".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serialises");
        hex::encode(Sha256::digest(bytes))
    }

    /// Independent seed for a named stage or sub-step.
    pub fn seed_for(&self, label: &str) -> u64 {
        derive_named_seed(self.seed, label)
    }
}
