use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
const SPECIALS: usize = 3;

/// Printable characters after the three specials, 61 of them, giving |V| = 64.
const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz0123456789AQC+-*=:.,?!'()[]{}<>/;\n";

/// Character-level tokenizer shared by every model in the laboratory.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    alphabet: Vec<char>,
    lookup: [Option<TokenId>; 128],
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let alphabet: Vec<char> = ALPHABET.chars().collect();
        let mut lookup = [None; 128];
        for (i, c) in alphabet.iter().enumerate() {
            lookup[*c as usize] = Some((i + SPECIALS) as TokenId);
        }
        Self { alphabet, lookup }
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() + SPECIALS
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                let idx = c as usize;
                (idx < 128)
                    .then(|| self.lookup[idx])
                    .flatten()
                    .ok_or_else(|| Error::Validation(format!("character {c:?} is not in the alphabet")))
            })
            .collect()
    }

    /// Inverse of [`encode`](Self::encode). Special tokens render as nothing.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            let id = id as usize;
            if id < SPECIALS {
                continue;
            }
            let c = self
                .alphabet
                .get(id - SPECIALS)
                .ok_or_else(|| Error::Validation(format!("token id {id} out of vocabulary")))?;
            out.push(*c);
        }
        Ok(out)
    }

    /// Human-readable rendering that keeps specials visible.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| match id {
                PAD => "<pad>".to_string(),
                BOS => "<bos>".to_string(),
                EOS => "<eos>".to_string(),
                _ => self
                    .alphabet
                    .get(id as usize - SPECIALS)
                    .map_or_else(|| "<?>".to_string(), |c| c.to_string()),
            })
            .collect()
    }
}
