use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::CorpusSample;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Token ↔ id map. Specials occupy ids 0..4; serialized as a JSON array.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or UNK.
    pub fn encode_token(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(serde::de::Error::custom("vocabulary must start with the four special tokens"));
        }
        Ok(Self::from_tokens(tokens.into_iter().skip(SPECIALS.len())))
    }
}

fn token_counts<'a>(train: impl IntoIterator<Item = &'a CorpusSample>) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in train {
        for t in s.sentences.iter().flatten() {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Keeps training tokens seen strictly more than `min_count` times, in
/// alphabetical order after the specials.
pub fn build_vocab<'a>(
    train: impl IntoIterator<Item = &'a CorpusSample>,
    min_count: usize,
) -> Result<Vocabulary> {
    let counts = token_counts(train);
    if counts.is_empty() {
        return Err(Error::Validation("cannot build a vocabulary from an empty split".into()));
    }
    Ok(Vocabulary::from_tokens(
        counts
            .into_iter()
            .filter(|(_, c)| *c > min_count)
            .map(|(t, _)| t),
    ))
}

/// Ordered keyword list used to summarise retrieved text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeywordDictionary(Vec<String>);

impl KeywordDictionary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Validation("keyword dictionary is empty".into()));
        }
        Ok(Self(words))
    }

    pub fn words(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.0.iter().position(|w| w.eq_ignore_ascii_case(word))
    }
}

/// The `size` most frequent training tokens among `domain_terms` that made
/// it into `vocab`; ties broken alphabetically.
pub fn build_keyword_dictionary<'a>(
    train: impl IntoIterator<Item = &'a CorpusSample>,
    domain_terms: &[String],
    vocab: &Vocabulary,
    size: usize,
) -> Result<KeywordDictionary> {
    let counts = token_counts(train);
    let mut ranked: Vec<(&String, usize)> = domain_terms
        .iter()
        .filter(|t| vocab.contains(t))
        .filter_map(|t| counts.get(t).map(|&c| (t, c)))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if size > ranked.len() {
        log::warn!(
            "keyword dictionary size {size} exceeds the {} available domain terms",
            ranked.len()
        );
    }
    KeywordDictionary::new(ranked.into_iter().take(size).map(|(t, _)| t.clone()).collect())
}
