use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Encoded;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token ↔ id mapping. Ids 0–3 are reserved; the rest follow descending
/// corpus frequency with ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::from_tokens(r.tokens)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocab {
    /// Counts tokens over every example and keeps the `max_size − 4` most
    /// frequent.
    pub fn build(dataset: &Dataset, max_size: usize) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Contract("cannot build a vocabulary from an empty dataset".into()));
        }
        if max_size < RESERVED.len() {
            return Err(Error::Config(format!("vocabulary size {max_size} below the 4 reserved tokens")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for ex in dataset.examples() {
            for tok in tokenize(&ex.text) {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Contract("vocabulary must start with [PAD] [UNK] [CLS] [SEP]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS] tokens… [SEP]`, truncated to `max_len` (the separator is kept)
    /// and padded with `[PAD]`. Segment ids are all 0.
    pub fn encode(&self, text: &str, max_len: usize) -> Encoded {
        assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(tokenize(text).iter().take(max_len - 2).map(|t| self.id(t)));
        ids.push(SEP);
        let real = ids.len();
        ids.resize(max_len, PAD);
        Encoded {
            ids,
            mask: (0..max_len).map(|i| i < real).collect(),
            segments: vec![0; max_len],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
