//! Chain speculative decoding with the lossless accept/reject rule, and the
//! acceptance-length and speedup metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::{argmax, sample_from, token_distribution, LanguageModel};
use crate::nn::rng::{derive_seed, rng_from_seed, LabRng};

/// Residual entries below this are treated as zero.
const RESIDUAL_FLOOR: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    /// Draft tokens proposed per round.
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Generation stops once this token is emitted.
    pub eos: Option<TokenId>,
}

impl SpecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} is not ≥ 0", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Speculation {
    pub candidates: Vec<TokenId>,
    /// Draft distribution each candidate was drawn from (one-hot at `T = 0`).
    pub draft_probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub accepted_count: usize,
    /// Accepted candidates followed by exactly one target-sourced token.
    pub emitted: Vec<TokenId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub accepted_count: usize,
    /// The target-sourced token (replacement or bonus) made it into the output.
    pub bonus_emitted: bool,
    pub target_calls: usize,
    pub draft_calls: usize,
    /// Tokens this round appended to the output.
    pub emitted: usize,
    /// Cut short by the token budget or the context window; such rounds do
    /// not count towards τ. A round ended by an end-of-sequence token keeps
    /// its full verification outcome and is not truncated.
    pub truncated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRecord {
    pub rounds: Vec<RoundRecord>,
    pub tokens_generated: usize,
}

impl AcceptanceRecord {
    pub fn target_calls(&self) -> usize {
        self.rounds.iter().map(|r| r.target_calls).sum()
    }

    pub fn draft_calls(&self) -> usize {
        self.rounds.iter().map(|r| r.draft_calls).sum()
    }

    pub fn complete_rounds(&self) -> impl Iterator<Item = &RoundRecord> {
        self.rounds.iter().filter(|r| !r.truncated)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub output: Vec<TokenId>,
    pub record: AcceptanceRecord,
}

fn check_pair(target: &dyn LanguageModel, draft: &dyn LanguageModel) -> Result<()> {
    if target.vocab_size() != draft.vocab_size() {
        return Err(Error::Config(format!(
            "draft vocabulary {} differs from target vocabulary {}",
            draft.vocab_size(),
            target.vocab_size()
        )));
    }
    Ok(())
}

fn last_row(model: &dyn LanguageModel, tokens: &[TokenId]) -> Result<Vec<f64>> {
    let logits = model.logits(tokens)?;
    Ok(logits.row(logits.rows() - 1).to_vec())
}

/// Samples `k` candidates autoregressively from the draft.
pub fn speculate(
    draft: &dyn LanguageModel,
    prefix: &[TokenId],
    k: usize,
    temperature: f64,
    rng: &mut LabRng,
) -> Result<Speculation> {
    if prefix.is_empty() {
        return Err(Error::Validation("empty prefix".into()));
    }
    if prefix.len() + k > draft.max_seq_len() {
        return Err(Error::Length(format!(
            "prefix of {} plus {k} candidates exceeds the context of {}",
            prefix.len(),
            draft.max_seq_len()
        )));
    }
    let mut seq = prefix.to_vec();
    let mut out = Speculation {
        candidates: Vec::with_capacity(k),
        draft_probs: Vec::with_capacity(k),
    };
    for _ in 0..k {
        let q = token_distribution(&last_row(draft, &seq)?, temperature);
        let c = if temperature == 0.0 {
            argmax(&q)
        } else {
            sample_from(&q, rng)
        } as TokenId;
        seq.push(c);
        out.candidates.push(c);
        out.draft_probs.push(q);
    }
    Ok(out)
}

/// One target pass over `prefix ++ candidates`, then left-to-right
/// accept/reject with `min(1, p/q)` and a single target-sourced token.
pub fn verify(
    target: &dyn LanguageModel,
    prefix: &[TokenId],
    spec: &Speculation,
    temperature: f64,
    rng: &mut LabRng,
) -> Result<Verification> {
    let k = spec.candidates.len();
    if spec.draft_probs.len() != k || k == 0 {
        return Err(Error::Validation("candidates and draft distributions disagree".into()));
    }
    let mut seq = prefix.to_vec();
    seq.extend_from_slice(&spec.candidates);
    let logits = target.logits(&seq)?;
    let base = prefix.len() - 1;
    let mut emitted = Vec::with_capacity(k + 1);
    for (i, (&c, q)) in spec.candidates.iter().zip(&spec.draft_probs).enumerate() {
        let row = logits.row(base + i);
        if temperature == 0.0 {
            let best = argmax(row) as TokenId;
            if c == best {
                emitted.push(c);
                continue;
            }
            emitted.push(best);
            return Ok(Verification {
                accepted_count: i,
                emitted,
            });
        }
        let p = token_distribution(row, temperature);
        let (pc, qc) = (p[c as usize], q[c as usize]);
        let u: f64 = rng.random();
        if u * qc < pc {
            emitted.push(c);
            continue;
        }
        let residual: Vec<f64> = p
            .iter()
            .zip(q)
            .map(|(a, b)| {
                let r = a - b;
                if r < RESIDUAL_FLOOR {
                    0.0
                } else {
                    r
                }
            })
            .collect();
        if residual.iter().sum::<f64>() == 0.0 {
            // p and q coincide up to rounding: the rejection branch has no mass.
            emitted.push(c);
            continue;
        }
        emitted.push(sample_from(&residual, rng) as TokenId);
        return Ok(Verification {
            accepted_count: i,
            emitted,
        });
    }
    let row = logits.row(base + k);
    let bonus = if temperature == 0.0 {
        argmax(row)
    } else {
        sample_from(&token_distribution(row, temperature), rng)
    } as TokenId;
    emitted.push(bonus);
    Ok(Verification {
        accepted_count: k,
        emitted,
    })
}

/// Speculate/verify rounds until the token budget, an end-of-sequence token
/// or the context limit. Round `r` draws its draft and verification
/// randomness from independent streams derived from `(seed, r)`.
pub fn generate(
    target: &dyn LanguageModel,
    draft: &dyn LanguageModel,
    prompt: &[TokenId],
    cfg: &SpecConfig,
) -> Result<Generation> {
    cfg.validate()?;
    check_pair(target, draft)?;
    if prompt.is_empty() {
        return Err(Error::Validation("empty prompt".into()));
    }
    let limit = target.max_seq_len().min(draft.max_seq_len());
    if prompt.len() > limit {
        return Err(Error::Length(format!("prompt of {} exceeds context {limit}", prompt.len())));
    }
    let mut out = prompt.to_vec();
    let mut record = AcceptanceRecord::default();
    let mut round = 0u64;
    loop {
        let produced = out.len() - prompt.len();
        let budget = cfg.max_new_tokens - produced;
        let room = limit - out.len();
        if budget == 0 || room == 0 {
            break;
        }
        let k = cfg.k.min(room);
        let round_seed = derive_seed(cfg.seed, round);
        let mut draft_rng = rng_from_seed(derive_seed(round_seed, 0));
        let mut verify_rng = rng_from_seed(derive_seed(round_seed, 1));
        let spec = speculate(draft, &out, k, cfg.temperature, &mut draft_rng)?;
        let ver = verify(target, &out, &spec, cfg.temperature, &mut verify_rng)?;
        let full = ver.emitted.len();
        let fits = full.min(budget).min(room);
        let eos_at = cfg
            .eos
            .and_then(|eos| ver.emitted[..fits].iter().position(|&t| t == eos));
        let keep = eos_at.map_or(fits, |p| p + 1);
        out.extend_from_slice(&ver.emitted[..keep]);
        record.rounds.push(RoundRecord {
            accepted_count: ver.accepted_count,
            bonus_emitted: keep == full,
            target_calls: 1,
            draft_calls: k,
            emitted: keep,
            // An end-of-sequence cut does not shorten verification, so the
            // round still counts; budget and context cuts do not.
            truncated: k < cfg.k || (eos_at.is_none() && fits < full),
        });
        let hit_eos = eos_at.is_some();
        round += 1;
        if hit_eos {
            break;
        }
    }
    record.tokens_generated = out.len() - prompt.len();
    Ok(Generation { output: out, record })
}

/// Plain target-only decoding, one target call per token.
pub fn autoregressive(
    target: &dyn LanguageModel,
    prompt: &[TokenId],
    temperature: f64,
    max_new_tokens: usize,
    eos: Option<TokenId>,
    seed: u64,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::Validation("empty prompt".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = prompt.to_vec();
    while out.len() - prompt.len() < max_new_tokens && out.len() < target.max_seq_len() {
        let row = last_row(target, &out)?;
        let t = crate::model::sample_token(&row, temperature, &mut rng);
        out.push(t);
        if Some(t) == eos {
            break;
        }
    }
    Ok(out)
}

/// Mean accepted draft tokens per complete round, over all records.
pub fn measure_tau(records: &[AcceptanceRecord]) -> Result<f64> {
    let (sum, n) = records
        .iter()
        .flat_map(|r| r.complete_rounds())
        .fold((0usize, 0usize), |(s, n), r| (s + r.accepted_count, n + 1));
    if n == 0 {
        return Err(Error::UndefinedMetric("τ needs at least one complete round".into()));
    }
    Ok(sum as f64 / n as f64)
}

/// Number of complete rounds across records.
pub fn complete_round_count(records: &[AcceptanceRecord]) -> usize {
    records.iter().map(|r| r.complete_rounds().count()).sum()
}

/// `tokens / (target_calls + c · draft_calls)`, summed over records.
pub fn speedup_proxy(records: &[AcceptanceRecord], draft_cost_ratio: f64) -> Result<f64> {
    if !(draft_cost_ratio >= 0.0) {
        return Err(Error::Validation(format!("draft cost ratio {draft_cost_ratio} is negative")));
    }
    let tokens: usize = records.iter().map(|r| r.tokens_generated).sum();
    let cost: f64 = records
        .iter()
        .map(|r| r.target_calls() as f64 + draft_cost_ratio * r.draft_calls() as f64)
        .sum();
    if cost == 0.0 {
        return Err(Error::UndefinedMetric("no model calls recorded".into()));
    }
    Ok(tokens as f64 / cost)
}
