use std::sync::atomic::{AtomicU64, Ordering};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::nn::rng::{rng_from_seed, LabRng};
use crate::nn::{attention_block, AttentionVars, Matrix, ParamId, ParamStore, Tape, Var};

use super::config::ModelConfig;

/// `E(h) = U·silu(V·h)` with `V: m × d` and `U: d × m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertParams {
    pub down: ParamId,
    pub up: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatedExpertBlock {
    pub shared: ExpertParams,
    pub private: ExpertParams,
    /// `1 × d` routing vectors.
    pub route_shared: ParamId,
    pub route_private: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedForward {
    Plain(ExpertParams),
    Gated(GatedExpertBlock),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub attn_norm: ParamId,
    pub attn: AttentionParams,
    pub ffn_norm: ParamId,
    pub ffn: FeedForward,
}

/// Handles to the outputs of a forward pass recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeForward {
    pub logits: Var,
    pub hiddens: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Matrix,
    /// Post-final-norm states, one row per position.
    pub hiddens: Matrix,
}

/// Pre-norm decoder-only transformer with learned positions and no biases.
#[derive(Debug)]
pub struct Transformer {
    config: ModelConfig,
    params: ParamStore,
    token_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    final_norm: ParamId,
    head: ParamId,
    calls: AtomicU64,
}

impl Clone for Transformer {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            token_embed: self.token_embed,
            pos_embed: self.pos_embed,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm,
            head: self.head,
            calls: AtomicU64::new(self.forward_calls()),
        }
    }
}

fn expert_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.down"), format!("{prefix}.up"))
}

impl Transformer {
    /// Randomly initialised model with plain FFNs.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let ModelConfig {
            vocab_size: v,
            model_dim: d,
            ffn_dim: m,
            n_layers,
            max_seq_len,
            ..
        } = config;
        let depth = 1.0 / (2.0 * n_layers as f64).sqrt();
        let in_std = 1.0 / (d as f64).sqrt();
        let mut p = ParamStore::new();
        let randn = |r: usize, c: usize, std: f64, rng: &mut LabRng| Matrix::randn(r, c, std, rng);
        p.add("embed.tokens", randn(v, d, 0.3, &mut rng));
        p.add("embed.positions", randn(max_seq_len, d, 0.1, &mut rng));
        for i in 0..n_layers {
            p.add(format!("blocks.{i}.attn_norm"), Matrix::filled(1, d, 1.0));
            for w in ["q", "k", "v"] {
                p.add(format!("blocks.{i}.attn.{w}"), randn(d, d, in_std, &mut rng));
            }
            p.add(format!("blocks.{i}.attn.o"), randn(d, d, in_std * depth, &mut rng));
            p.add(format!("blocks.{i}.ffn_norm"), Matrix::filled(1, d, 1.0));
            let (down, up) = expert_names(&format!("blocks.{i}.ffn"));
            p.add(down, randn(m, d, in_std, &mut rng));
            p.add(up, randn(d, m, depth / (m as f64).sqrt(), &mut rng));
        }
        p.add("final_norm", Matrix::filled(1, d, 1.0));
        p.add("head", randn(v, d, in_std, &mut rng));
        Self::from_store(config, p)
    }

    /// Rebuilds the structure from parameter names. A block is gated when its
    /// `ffn.shared.down` entry exists.
    pub fn from_store(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            vocab_size: v,
            model_dim: d,
            ffn_dim: m,
            max_seq_len,
            ..
        } = config;
        let shaped = |name: &str, shape: (usize, usize)| -> Result<ParamId> {
            let id = params.require(name)?;
            let got = params.get(id).shape();
            if got != shape {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {got:?}, expected {shape:?}"
                )));
            }
            Ok(id)
        };
        let expert = |prefix: &str| -> Result<ExpertParams> {
            let (down, up) = expert_names(prefix);
            Ok(ExpertParams {
                down: shaped(&down, (m, d))?,
                up: shaped(&up, (d, m))?,
            })
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let b = format!("blocks.{i}");
            let ffn = if params.find(&format!("{b}.ffn.shared.down")).is_some() {
                FeedForward::Gated(GatedExpertBlock {
                    shared: expert(&format!("{b}.ffn.shared"))?,
                    private: expert(&format!("{b}.ffn.private"))?,
                    route_shared: shaped(&format!("{b}.ffn.route_shared"), (1, d))?,
                    route_private: shaped(&format!("{b}.ffn.route_private"), (1, d))?,
                })
            } else {
                FeedForward::Plain(expert(&format!("{b}.ffn"))?)
            };
            blocks.push(Block {
                attn_norm: shaped(&format!("{b}.attn_norm"), (1, d))?,
                attn: AttentionParams {
                    query: shaped(&format!("{b}.attn.q"), (d, d))?,
                    key: shaped(&format!("{b}.attn.k"), (d, d))?,
                    value: shaped(&format!("{b}.attn.v"), (d, d))?,
                    output: shaped(&format!("{b}.attn.o"), (d, d))?,
                },
                ffn_norm: shaped(&format!("{b}.ffn_norm"), (1, d))?,
                ffn,
            });
        }
        Ok(Self {
            token_embed: shaped("embed.tokens", (v, d))?,
            pos_embed: shaped("embed.positions", (max_seq_len, d))?,
            final_norm: shaped("final_norm", (1, d))?,
            head: shaped("head", (v, d))?,
            blocks,
            config,
            params,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn is_gated(&self) -> bool {
        self.blocks.iter().all(|b| matches!(b.ffn, FeedForward::Gated(_)))
    }

    pub fn is_plain(&self) -> bool {
        self.blocks.iter().all(|b| matches!(b.ffn, FeedForward::Plain(_)))
    }

    /// Number of forward passes run so far, on or off a tape.
    pub fn forward_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Validation("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {t} out of range for |V| = {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records a full forward pass on `tape`, reading parameters from `store`
    /// (which must share this model's layout). Gradients reach parameter `i`
    /// only when `trainable[i]`.
    pub fn forward_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &[TokenId],
        trainable: &[bool],
    ) -> Result<TapeForward> {
        self.check_tokens(tokens)?;
        if store.len() != self.params.len() || trainable.len() != store.len() {
            return Err(Error::Shape("parameter store does not match the model layout".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let param = |tape: &mut Tape<'a>, id: ParamId| tape.param(id, store.get(id), trainable[id.index()]);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = param(tape, self.token_embed);
        let emb = tape.gather(table, &ids)?;
        let pos_table = param(tape, self.pos_embed);
        let pos = tape.slice_rows(pos_table, 0, tokens.len())?;
        let mut x = tape.add(emb, pos)?;
        for b in &self.blocks {
            let g = param(tape, b.attn_norm);
            let h = tape.rms_norm(x, g)?;
            let vars = AttentionVars {
                query: param(tape, b.attn.query),
                key: param(tape, b.attn.key),
                value: param(tape, b.attn.value),
                output: param(tape, b.attn.output),
                heads: self.config.n_heads,
            };
            let a = attention_block(tape, h, &vars)?;
            x = tape.add(x, a)?;
            let g = param(tape, b.ffn_norm);
            let h = tape.rms_norm(x, g)?;
            let f = match b.ffn {
                FeedForward::Plain(e) => {
                    let (down, up) = (param(tape, e.down), param(tape, e.up));
                    expert_on_tape(tape, h, down, up)?
                }
                FeedForward::Gated(gb) => {
                    let vars = GatedVars {
                        shared_down: param(tape, gb.shared.down),
                        shared_up: param(tape, gb.shared.up),
                        private_down: param(tape, gb.private.down),
                        private_up: param(tape, gb.private.up),
                        route_shared: param(tape, gb.route_shared),
                        route_private: param(tape, gb.route_private),
                    };
                    gated_on_tape(tape, h, &vars)?
                }
            };
            x = tape.add(x, f)?;
        }
        let g = param(tape, self.final_norm);
        let hiddens = tape.rms_norm(x, g)?;
        let head = param(tape, self.head);
        let logits = tape.matmul_t(hiddens, head)?;
        Ok(TapeForward { logits, hiddens })
    }

    pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let frozen = vec![false; self.params.len()];
        let out = self.forward_on_tape(&mut tape, &self.params, tokens, &frozen)?;
        let hiddens = tape.value(out.hiddens).clone();
        Ok(ForwardOutput {
            logits: tape.into_value(out.logits),
            hiddens,
        })
    }

    /// Replaces every plain FFN by a gated block whose shared expert is the
    /// old FFN, private expert a copy of it, and routing vectors zero.
    pub fn to_gated(&self) -> Result<Transformer> {
        if !self.is_plain() {
            return Err(Error::Config("model already has gated feed-forward blocks".into()));
        }
        let d = self.config.model_dim;
        let mut p = ParamStore::new();
        for (_, name, value) in self.params.iter() {
            match name.strip_prefix("blocks.").and_then(|rest| {
                let (layer, tail) = rest.split_once('.')?;
                Some((layer.to_string(), tail.to_string()))
            }) {
                Some((layer, tail)) if tail == "ffn.down" || tail == "ffn.up" => {
                    let which = tail.trim_start_matches("ffn.");
                    p.add(format!("blocks.{layer}.ffn.shared.{which}"), value.clone());
                    p.add(format!("blocks.{layer}.ffn.private.{which}"), value.clone());
                    if which == "up" {
                        p.add(format!("blocks.{layer}.ffn.route_shared"), Matrix::zeros(1, d));
                        p.add(format!("blocks.{layer}.ffn.route_private"), Matrix::zeros(1, d));
                    }
                }
                _ => {
                    p.add(name, value.clone());
                }
            }
        }
        Transformer::from_store(self.config.clone(), p)
    }
}

fn expert_on_tape(tape: &mut Tape<'_>, h: Var, down: Var, up: Var) -> Result<Var> {
    let z = tape.matmul_t(h, down)?;
    let a = tape.silu(z);
    tape.matmul_t(a, up)
}

pub(crate) struct GatedVars {
    pub shared_down: Var,
    pub shared_up: Var,
    pub private_down: Var,
    pub private_up: Var,
    pub route_shared: Var,
    pub route_private: Var,
}

/// Returns `(output, gates)` where gates is `L × 2` with columns `(g^s, g^p)`.
pub(crate) fn gated_on_tape_with_gates(tape: &mut Tape<'_>, h: Var, p: &GatedVars) -> Result<(Var, Var)> {
    let es = expert_on_tape(tape, h, p.shared_down, p.shared_up)?;
    let ep = expert_on_tape(tape, h, p.private_down, p.private_up)?;
    let us = tape.matmul_t(h, p.route_shared)?;
    let up = tape.matmul_t(h, p.route_private)?;
    let u = tape.concat_cols(us, up)?;
    let g = tape.softmax_rows(u);
    let gs = tape.slice_cols(g, 0, 1)?;
    let gp = tape.slice_cols(g, 1, 1)?;
    let a = tape.mul_col(es, gs)?;
    let b = tape.mul_col(ep, gp)?;
    Ok((tape.add(a, b)?, g))
}

fn gated_on_tape(tape: &mut Tape<'_>, h: Var, p: &GatedVars) -> Result<Var> {
    gated_on_tape_with_gates(tape, h, p).map(|(out, _)| out)
}

/// Position-wise `g^s ⊙ E^s(h) + g^p ⊙ E^p(h)` with gates
/// `softmax([h·w^s, h·w^p])`, evaluated on plain matrices.
pub fn gated_ffn_forward(h: &Matrix, store: &ParamStore, block: &GatedExpertBlock) -> Result<Matrix> {
    gated_ffn_with_gates(h, store, block).map(|(out, _)| out)
}

/// As [`gated_ffn_forward`], also returning the `L × 2` gate matrix.
pub fn gated_ffn_with_gates(
    h: &Matrix,
    store: &ParamStore,
    block: &GatedExpertBlock,
) -> Result<(Matrix, Matrix)> {
    let d = store.get(block.route_shared).cols();
    if h.cols() != d {
        return Err(Error::Shape(format!("hidden width {} for a block of width {d}", h.cols())));
    }
    let mut tape = Tape::new();
    let mut c = |id: ParamId| tape.param(id, store.get(id), false);
    let vars = GatedVars {
        shared_down: c(block.shared.down),
        shared_up: c(block.shared.up),
        private_down: c(block.private.down),
        private_up: c(block.private.up),
        route_shared: c(block.route_shared),
        route_private: c(block.route_private),
    };
    let hv = tape.constant(h.clone());
    let (out, g) = gated_on_tape_with_gates(&mut tape, hv, &vars)?;
    let gates = tape.value(g).clone();
    Ok((tape.into_value(out), gates))
}
