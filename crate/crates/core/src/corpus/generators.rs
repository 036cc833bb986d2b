//! Synthetic corpora standing in for general chat data and two specialised domains.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusSample, Tokenizer, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::rng::{rng_from_seed, LabRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    BaseText,
    Arithmetic,
    BracketCode,
}

impl Generator {
    pub fn domain_tag(self) -> &'static str {
        match self {
            Generator::BaseText => "base_text",
            Generator::Arithmetic => "arithmetic",
            Generator::BracketCode => "bracket_code",
        }
    }
}

/// Inclusive bounds whose meaning depends on the generator: words per
/// sentence for `base_text`, operand values for `arithmetic`, bracket pairs
/// for `bracket_code`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBounds {
    pub min: u32,
    pub max: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub generator: Generator,
    pub size: usize,
    pub seed: u64,
    pub bounds: LengthBounds,
    /// Offset added to every sample id so that several files can share an id space.
    #[serde(default)]
    pub first_id: u64,
}

impl CorpusSpec {
    pub fn new(generator: Generator, size: usize, seed: u64) -> Self {
        let bounds = match generator {
            Generator::BaseText => LengthBounds { min: 3, max: 6 },
            Generator::Arithmetic => LengthBounds { min: 0, max: 99 },
            Generator::BracketCode => LengthBounds { min: 2, max: 6 },
        };
        Self {
            generator,
            size,
            seed,
            bounds,
            first_id: 0,
        }
    }
}

/// Generates the corpus described by `spec`; a pure function of the spec.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<CorpusSample>> {
    if spec.size == 0 {
        return Err(Error::Validation("corpus size must be at least 1".into()));
    }
    if spec.bounds.min > spec.bounds.max {
        return Err(Error::Validation("length bounds are inverted".into()));
    }
    let tok = Tokenizer::new();
    let mut rng = rng_from_seed(spec.seed);
    (0..spec.size)
        .map(|i| {
            let (prompt, answer) = match spec.generator {
                Generator::BaseText => sentence(&mut rng, spec.bounds),
                Generator::Arithmetic => arithmetic(&mut rng, spec.bounds),
                Generator::BracketCode => brackets(&mut rng, spec.bounds),
            };
            let mut prompt_tokens = vec![BOS];
            prompt_tokens.extend(tok.encode(&prompt)?);
            let mut answer_tokens = tok.encode(&answer)?;
            answer_tokens.push(EOS);
            Ok(CorpusSample::new(
                spec.first_id + i as u64,
                spec.generator.domain_tag(),
                prompt_tokens,
                answer_tokens,
            ))
        })
        .collect()
}

pub fn gen_base_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusSample>> {
    expect_generator(spec, Generator::BaseText)?;
    generate(spec)
}

pub fn gen_domain_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusSample>> {
    if spec.generator == Generator::BaseText {
        return Err(Error::Config("domain corpora use arithmetic or bracket_code".into()));
    }
    generate(spec)
}

fn expect_generator(spec: &CorpusSpec, g: Generator) -> Result<()> {
    if spec.generator != g {
        return Err(Error::Config(format!(
            "expected generator {:?}, got {:?}",
            g, spec.generator
        )));
    }
    Ok(())
}

const DETERMINERS: &[&str] = &["the", "a", "my", "one", "two", "3", "12", "every", "this"];
const ADJECTIVES: &[&str] = &["big", "small", "red", "old", "quick", "lazy", "happy", "new"];
const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "man", "girl", "boy", "tree", "car", "book", "fish", "horse", "river",
];
const VERBS: &[&str] = &[
    "sees", "likes", "finds", "eats", "takes", "makes", "wants", "helps", "reads", "hears",
];
const TAILS: &[&str] = &[
    "today", "again", "at 5", "at 10", "in 2 days", "with joy", "now", "slowly", "for 7 hours",
];

/// Subject–verb–object sentence over the word bank; prompt is the first half of the words.
fn sentence(rng: &mut LabRng, bounds: LengthBounds) -> (String, String) {
    let target_words = rng.random_range(bounds.min..=bounds.max).max(3) as usize;
    let mut words: Vec<&str> = Vec::new();
    let noun_phrase = |rng: &mut LabRng, words: &mut Vec<&str>| {
        words.push(DETERMINERS.choose(rng).unwrap());
        if rng.random_bool(0.4) {
            words.push(ADJECTIVES.choose(rng).unwrap());
        }
        words.push(NOUNS.choose(rng).unwrap());
    };
    noun_phrase(rng, &mut words);
    words.push(VERBS.choose(rng).unwrap());
    noun_phrase(rng, &mut words);
    if words.len() < target_words {
        words.push(TAILS.choose(rng).unwrap());
    }
    let split = words.len().div_ceil(2);
    let prompt = format!("{} ", words[..split].join(" "));
    let answer = format!("{} .", words[split..].join(" "));
    (prompt, answer)
}

/// `Q:<a><op><b>= A:` followed by the exact result.
fn arithmetic(rng: &mut LabRng, bounds: LengthBounds) -> (String, String) {
    let a = rng.random_range(bounds.min..=bounds.max) as i64;
    let b = rng.random_range(bounds.min..=bounds.max) as i64;
    let (op, value) = match rng.random_range(0..3) {
        0 => ('+', a + b),
        1 => ('-', a - b),
        _ => ('*', a * b),
    };
    (format!("Q:{a}{op}{b}= A:"), value.to_string())
}

const OPEN: [char; 4] = ['(', '[', '{', '<'];
const CLOSE: [char; 4] = [')', ']', '}', '>'];

/// A random well-matched bracket sequence split inside an open region.
fn brackets(rng: &mut LabRng, bounds: LengthBounds) -> (String, String) {
    let pairs = rng.random_range(bounds.min.max(1)..=bounds.max.max(1)) as usize;
    let mut out = String::new();
    let mut stack = Vec::new();
    let mut opened = 0;
    let mut splits = Vec::new();
    while opened < pairs || !stack.is_empty() {
        let can_open = opened < pairs;
        if can_open && (stack.is_empty() || rng.random_bool(0.55)) {
            let k = rng.random_range(0..OPEN.len());
            out.push(OPEN[k]);
            stack.push(k);
            opened += 1;
        } else {
            let k = stack.pop().expect("non-empty stack");
            out.push(CLOSE[k]);
        }
        if !stack.is_empty() {
            splits.push(out.len());
        }
    }
    let split = *splits.choose(rng).expect("at least one open position");
    (format!("C:{}", &out[..split]), out[split..].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn generation_is_a_pure_function_of_the_spec() {
        for g in [Generator::BaseText, Generator::Arithmetic, Generator::BracketCode] {
            let spec = CorpusSpec::new(g, 50, 17);
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        }
    }

    #[test]
    fn base_corpus_shape() {
        let samples = gen_base_corpus(&CorpusSpec::new(Generator::BaseText, 1000, 1)).unwrap();
        assert_eq!(samples.len(), 1000);
        let ids: HashSet<u64> = samples.iter().map(|s| s.sample_id).collect();
        assert_eq!(ids.len(), 1000);
        let v = Tokenizer::new().vocab_size() as u32;
        for s in &samples {
            assert!(s.prompt_tokens.iter().chain(&s.answer_tokens).all(|&t| t < v));
            assert_eq!(s.prompt_tokens[0], BOS);
            assert_eq!(*s.answer_tokens.last().unwrap(), EOS);
        }
        assert!(gen_base_corpus(&CorpusSpec::new(Generator::Arithmetic, 3, 1)).is_err());
        assert!(generate(&CorpusSpec::new(Generator::BaseText, 0, 1)).is_err());
    }

    #[test]
    fn arithmetic_is_exact() {
        let tok = Tokenizer::new();
        let samples = gen_domain_corpus(&CorpusSpec::new(Generator::Arithmetic, 2000, 4)).unwrap();
        for s in &samples {
            let prompt = tok.decode(&s.prompt_tokens).unwrap();
            let answer = tok.decode(&s.answer_tokens).unwrap();
            assert!(answer.len() <= 5, "{answer}");
            let body = prompt.strip_prefix("Q:").unwrap().strip_suffix("= A:").unwrap();
            let pos = body[1..].find(['+', '-', '*']).unwrap() + 1;
            let (a, b): (i64, i64) = (body[..pos].parse().unwrap(), body[pos + 1..].parse().unwrap());
            let expected = match &body[pos..=pos] {
                "+" => a + b,
                "-" => a - b,
                _ => a * b,
            };
            assert_eq!(answer, expected.to_string());
        }
    }

    #[test]
    fn disjoint_seeds_collide_no_more_than_chance() {
        // 3 operators × 100 × 100 operand pairs; birthday expectation n1·n2/30000.
        let n = 1000;
        let a = gen_domain_corpus(&CorpusSpec::new(Generator::Arithmetic, n, 100)).unwrap();
        let b = gen_domain_corpus(&CorpusSpec::new(Generator::Arithmetic, n, 200)).unwrap();
        let set_a: HashSet<&[u32]> = a.iter().map(|s| s.prompt_tokens.as_slice()).collect();
        let collisions = b.iter().filter(|s| set_a.contains(s.prompt_tokens.as_slice())).count();
        let expected = (n * n) as f64 / 30_000.0;
        assert!(
            (collisions as f64) < 2.0 * expected,
            "{collisions} collisions, chance level {expected}"
        );
        assert!(collisions < n / 10);
    }

    #[test]
    fn brackets_are_balanced() {
        let tok = Tokenizer::new();
        let samples = gen_domain_corpus(&CorpusSpec::new(Generator::BracketCode, 300, 9)).unwrap();
        for s in &samples {
            let text = tok.decode(&s.full_sequence()).unwrap();
            let body = text.strip_prefix("C:").unwrap();
            let mut stack = Vec::new();
            for c in body.chars() {
                if let Some(k) = OPEN.iter().position(|&o| o == c) {
                    stack.push(k);
                } else {
                    let k = CLOSE.iter().position(|&o| o == c).unwrap();
                    assert_eq!(stack.pop(), Some(k));
                }
            }
            assert!(stack.is_empty());
            assert!(s.answer_tokens.len() >= 2);
        }
    }
}
