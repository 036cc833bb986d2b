//! Synthetic corpora, tokenization and dataset persistence.

mod generators;
mod tokenizer;
mod traces;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use generators::{
    gen_base_corpus, gen_domain_corpus, generate, CorpusSpec, Generator, LengthBounds,
};
pub use tokenizer::{TokenId, Tokenizer, BOS, EOS, PAD};
pub use traces::{read_traces, write_traces};

use crate::error::{Error, Result};

/// Provenance attached to a sample that survived subset selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionMeta {
    pub aggregate_score: f64,
    pub rho: f64,
    pub budget_fraction: f64,
    pub basis_hash: String,
}

/// Location of a sample's hidden-state trace inside a sidecar binary file.
///
/// `offset` and `len` count `f64` values, not bytes; the trace is `rows × cols`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenTraceRef {
    pub path: String,
    pub offset: u64,
    pub len: u64,
    pub rows: u32,
    pub cols: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub sample_id: u64,
    pub domain_tag: String,
    pub prompt_tokens: Vec<TokenId>,
    pub answer_tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_meta: Option<SelectionMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_trace_ref: Option<HiddenTraceRef>,
}

impl CorpusSample {
    pub fn new(
        sample_id: u64,
        domain_tag: impl Into<String>,
        prompt_tokens: Vec<TokenId>,
        answer_tokens: Vec<TokenId>,
    ) -> Self {
        Self {
            sample_id,
            domain_tag: domain_tag.into(),
            prompt_tokens,
            answer_tokens,
            selection_meta: None,
            hidden_trace_ref: None,
        }
    }

    /// Prompt followed by answer.
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut seq = self.prompt_tokens.clone();
        seq.extend_from_slice(&self.answer_tokens);
        seq
    }

    /// Positions of the answer tokens inside [`full_sequence`](Self::full_sequence).
    pub fn answer_indices(&self) -> std::ops::Range<usize> {
        self.prompt_tokens.len()..self.prompt_tokens.len() + self.answer_tokens.len()
    }
}

/// Writes one JSON object per line.
pub fn save_jsonl(samples: &[CorpusSample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::Format(format!("cannot serialise sample {}: {e}", s.sample_id)))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`save_jsonl`]; blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<CorpusSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> Vec<CorpusSample> {
        let mut s = generate(&CorpusSpec::new(Generator::Arithmetic, 5, 3)).unwrap();
        s[1].selection_meta = Some(SelectionMeta {
            aggregate_score: 3.25,
            rho: 0.9,
            budget_fraction: 0.5,
            basis_hash: "abc".into(),
        });
        s[2].hidden_trace_ref = Some(HiddenTraceRef {
            path: "traces.bin".into(),
            offset: 10,
            len: 6,
            rows: 2,
            cols: 3,
        });
        s
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let samples = sample_set();
        save_jsonl(&samples, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), samples);

        save_jsonl(&[], &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
        assert!(load_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_jsonl(&sample_set(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 9]).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn answer_indices_follow_the_prompt() {
        let s = &sample_set()[0];
        let seq = s.full_sequence();
        let a = s.answer_indices();
        assert_eq!(a.start, s.prompt_tokens.len());
        assert_eq!(a.end, seq.len());
        assert_eq!(&seq[a], s.answer_tokens.as_slice());
    }
}
