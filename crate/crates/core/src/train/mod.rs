//! Target training and fine-tuning, draft distillation, self-generation and
//! draft adaptation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSample, TokenId, EOS};
use crate::error::{Error, Result};
use crate::model::{
    make_freeze_mask, sample_token, DraftModel, FreezeMode, ModelConfig, TargetModel, Transformer,
};
use crate::nn::rng::{derive_named_seed, derive_seed, rng_from_seed};
use crate::nn::{softmax_rows, Adam, AdamConfig, Gradients, Matrix, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Weight of the hidden-state matching term in the draft loss.
    pub lambda_reg: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 4e-5,
            epochs: 20,
            lambda_reg: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::Config(format!("lambda_reg {} must be ≥ 0", self.lambda_reg)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token loss over each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub trainable_params: usize,
}

/// Full token sequences of `samples`, checked against the context length.
pub fn sequences(samples: &[CorpusSample], max_seq_len: usize) -> Result<Vec<Vec<TokenId>>> {
    samples
        .iter()
        .map(|s| {
            let seq = s.full_sequence();
            if seq.len() < 2 {
                return Err(Error::Validation(format!(
                    "sample {} has fewer than two tokens",
                    s.sample_id
                )));
            }
            if seq.len() > max_seq_len {
                return Err(Error::Length(format!(
                    "sample {} has {} tokens, context is {max_seq_len}",
                    s.sample_id,
                    seq.len()
                )));
            }
            Ok(seq)
        })
        .collect()
}

fn token_count(seqs: &[Vec<TokenId>], idx: &[usize]) -> Result<usize> {
    let mut n = 0;
    for &i in idx {
        let l = seqs[i].len();
        if l < 2 {
            return Err(Error::Validation("sequence shorter than two tokens".into()));
        }
        n += l - 1;
    }
    Ok(n)
}

/// Mini-batch Adam over `n` items. `batch_loss` returns the batch's mean
/// loss and accumulates its gradient.
fn fit<F>(net: &mut Transformer, flags: &[bool], n: usize, cfg: &TrainConfig, mut batch_loss: F) -> Result<TrainReport>
where
    F: FnMut(&Transformer, &[usize], &mut Gradients) -> Result<f64>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Validation("empty training set".into()));
    }
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let trainable_params = net
        .params()
        .iter()
        .filter(|(id, _, _)| flags[id.index()])
        .map(|(_, _, m)| m.len())
        .sum();
    let mut report = TrainReport {
        trainable_params,
        ..TrainReport::default()
    };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, epoch as u64)));
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::for_store(net.params());
            let loss = batch_loss(net, batch, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss became {loss} at epoch {epoch}, step {}",
                    report.steps
                )));
            }
            adam.step(net.params_mut(), &grads, flags)?;
            report.steps += 1;
            sum += loss;
            batches += 1;
        }
        report.epoch_losses.push(sum / batches as f64);
    }
    Ok(report)
}

/// Mean next-token cross entropy against the ground-truth tokens.
fn hard_loss(
    net: &Transformer,
    store: &ParamStore,
    seqs: &[Vec<TokenId>],
    idx: &[usize],
    flags: &[bool],
    mut grads: Option<&mut Gradients>,
) -> Result<f64> {
    let n = token_count(seqs, idx)?;
    let w = 1.0 / n as f64;
    let mut total = 0.0;
    for &i in idx {
        let seq = &seqs[i];
        let mut tape = Tape::new();
        let out = net.forward_on_tape(&mut tape, store, &seq[..seq.len() - 1], flags)?;
        let labels: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        let loss = tape.hard_cross_entropy(out.logits, &labels, w)?;
        total += tape.scalar(loss);
        if let Some(g) = grads.as_deref_mut() {
            tape.backward(loss, 1.0, g)?;
        }
    }
    Ok(total)
}

/// Mean next-token cross entropy of `net` on `samples`.
pub fn lm_loss(net: &Transformer, samples: &[CorpusSample]) -> Result<f64> {
    let seqs = sequences(samples, net.config().max_seq_len)?;
    let idx: Vec<usize> = (0..seqs.len()).collect();
    let flags = vec![false; net.params().len()];
    hard_loss(net, net.params(), &seqs, &idx, &flags, None)
}

fn fit_hard(net: &mut Transformer, samples: &[CorpusSample], cfg: &TrainConfig) -> Result<TrainReport> {
    let seqs = sequences(samples, net.config().max_seq_len)?;
    let flags = vec![true; net.params().len()];
    fit(net, &flags, seqs.len(), cfg, |net, idx, grads| {
        hard_loss(net, net.params(), &seqs, idx, &flags, Some(grads))
    })
}

/// Trains a fresh target on ground-truth next tokens.
pub fn train_target(
    corpus: &[CorpusSample],
    config: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TargetModel, TrainReport)> {
    let mut target = TargetModel::new(config, derive_named_seed(cfg.seed, "init"))?;
    let report = fit_hard(target.net_mut(), corpus, cfg)?;
    Ok((target, report))
}

/// Supervised fine-tuning that continues from `target`'s weights.
pub fn finetune_target(
    target: &TargetModel,
    domain: &[CorpusSample],
    cfg: &TrainConfig,
) -> Result<(TargetModel, TrainReport)> {
    let mut tuned = target.clone();
    let report = fit_hard(tuned.net_mut(), domain, cfg)?;
    Ok((tuned, report))
}

/// Teacher outputs for each sequence at positions `0..L−1`: the target's
/// next-token distribution and its post-norm hidden state.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub probs: Vec<Matrix>,
    pub hiddens: Vec<Matrix>,
}

impl Teacher {
    pub fn new(target: &TargetModel, seqs: &[Vec<TokenId>]) -> Result<Self> {
        let mut probs = Vec::with_capacity(seqs.len());
        let mut hiddens = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if seq.len() < 2 {
                return Err(Error::Validation("sequence shorter than two tokens".into()));
            }
            let out = target.forward(&seq[..seq.len() - 1])?;
            probs.push(softmax_rows(&out.logits));
            hiddens.push(out.hiddens);
        }
        Ok(Self { probs, hiddens })
    }
}

/// Draft loss split into its two terms: `total = ce + λ·reg`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillParts {
    pub total: f64,
    /// Mean soft cross entropy against the teacher distribution.
    pub ce: f64,
    /// Mean over positions of the mean squared hidden-state difference.
    pub reg: f64,
}

/// Distillation loss of `net` (reading parameters from `store`) on the
/// sequences `idx`, averaged over every predicted position.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss(
    net: &Transformer,
    store: &ParamStore,
    teacher: &Teacher,
    seqs: &[Vec<TokenId>],
    idx: &[usize],
    lambda: f64,
    flags: &[bool],
    mut grads: Option<&mut Gradients>,
) -> Result<DistillParts> {
    let n = token_count(seqs, idx)?;
    let d = net.config().model_dim;
    if teacher.hiddens.first().is_some_and(|h| h.cols() != d) {
        return Err(Error::Config("draft and target hidden widths differ".into()));
    }
    let mut parts = DistillParts {
        total: 0.0,
        ce: 0.0,
        reg: 0.0,
    };
    for &i in idx {
        let seq = &seqs[i];
        let mut tape = Tape::new();
        let out = net.forward_on_tape(&mut tape, store, &seq[..seq.len() - 1], flags)?;
        let ce = tape.soft_cross_entropy(out.logits, teacher.probs[i].clone(), 1.0 / n as f64)?;
        let reg = tape.squared_error(out.hiddens, teacher.hiddens[i].clone(), 1.0 / (n * d) as f64)?;
        let scaled = tape.scale(reg, lambda);
        let loss = tape.add(ce, scaled)?;
        parts.ce += tape.scalar(ce);
        parts.reg += tape.scalar(reg);
        parts.total += tape.scalar(loss);
        if let Some(g) = grads.as_deref_mut() {
            tape.backward(loss, 1.0, g)?;
        }
    }
    Ok(parts)
}

/// Draft loss of `draft` against `target` over `batch`.
pub fn draft_loss(
    draft: &DraftModel,
    target: &TargetModel,
    batch: &[Vec<TokenId>],
    lambda: f64,
) -> Result<DistillParts> {
    ModelConfig::check_pair(target.config(), draft.config())?;
    let teacher = Teacher::new(target, batch)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let flags = vec![false; draft.params().len()];
    distill_loss(draft.net(), draft.params(), &teacher, batch, &idx, lambda, &flags, None)
}

fn fit_distill(
    draft: &mut DraftModel,
    target: &TargetModel,
    samples: &[CorpusSample],
    flags: &[bool],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    ModelConfig::check_pair(target.config(), draft.config())?;
    let seqs = sequences(samples, draft.config().max_seq_len.min(target.config().max_seq_len))?;
    let teacher = Teacher::new(target, &seqs)?;
    fit(draft.net_mut(), flags, seqs.len(), cfg, |net, idx, grads| {
        distill_loss(net, net.params(), &teacher, &seqs, idx, cfg.lambda_reg, flags, Some(grads))
            .map(|p| p.total)
    })
}

/// Distils a fresh plain-FFN draft from a frozen target.
pub fn pretrain_draft(
    target: &TargetModel,
    corpus: &[CorpusSample],
    config: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(DraftModel, TrainReport)> {
    let mut draft = DraftModel::new(config, derive_named_seed(cfg.seed, "init"))?;
    let flags = vec![true; draft.params().len()];
    let report = fit_distill(&mut draft, target, corpus, &flags, cfg)?;
    Ok((draft, report))
}

/// Adapts `draft` towards `target` on `dataset`; under `Eda` only private
/// experts and routing vectors move.
pub fn adapt_draft(
    draft: &DraftModel,
    target: &TargetModel,
    dataset: &[CorpusSample],
    cfg: &TrainConfig,
    mode: FreezeMode,
) -> Result<(DraftModel, TrainReport)> {
    let mut adapted = draft.clone();
    let mask = make_freeze_mask(&adapted, mode)?;
    let report = fit_distill(&mut adapted, target, dataset, mask.flags(), cfg)?;
    Ok((adapted, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfGenConfig {
    /// 0 means greedy.
    pub sample_temperature: f64,
    pub max_completion_len: usize,
    pub record_hiddens: bool,
}

impl Default for SelfGenConfig {
    fn default() -> Self {
        Self {
            sample_temperature: 1.0,
            max_completion_len: 64,
            record_hiddens: true,
        }
    }
}

/// Target completions of domain prompts. `traces[i]` holds, for every answer
/// token of `samples[i]`, the target hidden state at the position that
/// predicted it (empty when hiddens are not recorded).
#[derive(Clone, Debug, PartialEq)]
pub struct SelfGenDataset {
    pub samples: Vec<CorpusSample>,
    pub traces: Vec<Matrix>,
}

/// Samples one completion per prompt from `target`; prompt `i` draws from a
/// stream derived from `(seed, sample_id)`.
pub fn self_generate(
    target: &TargetModel,
    prompts: &[CorpusSample],
    cfg: &SelfGenConfig,
    seed: u64,
) -> Result<SelfGenDataset> {
    if !(cfg.sample_temperature >= 0.0) {
        return Err(Error::Config("sample temperature must be ≥ 0".into()));
    }
    let max_len = target.config().max_seq_len;
    let d = target.config().model_dim;
    let mut samples = Vec::with_capacity(prompts.len());
    let mut traces = Vec::with_capacity(prompts.len());
    for p in prompts {
        if p.prompt_tokens.is_empty() {
            return Err(Error::Validation(format!("sample {} has an empty prompt", p.sample_id)));
        }
        let mut rng = rng_from_seed(derive_seed(seed, p.sample_id));
        let mut seq = p.prompt_tokens.clone();
        let mut hidden_rows = Vec::new();
        let mut answer = Vec::new();
        while answer.len() < cfg.max_completion_len && seq.len() < max_len {
            let out = target.forward(&seq)?;
            let last = out.logits.rows() - 1;
            let t = sample_token(out.logits.row(last), cfg.sample_temperature, &mut rng);
            if cfg.record_hiddens {
                hidden_rows.extend_from_slice(out.hiddens.row(last));
            }
            seq.push(t);
            answer.push(t);
            if t == EOS {
                break;
            }
        }
        let trace = if cfg.record_hiddens {
            Matrix::from_vec(answer.len(), d, hidden_rows)?
        } else {
            Matrix::zeros(0, 0)
        };
        samples.push(CorpusSample::new(
            p.sample_id,
            p.domain_tag.clone(),
            p.prompt_tokens.clone(),
            answer,
        ));
        traces.push(trace);
    }
    Ok(SelfGenDataset { samples, traces })
}
