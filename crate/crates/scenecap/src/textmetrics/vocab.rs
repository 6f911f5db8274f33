use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BEGIN: usize = 0;
pub const END: usize = 1;
pub const OOV: usize = 2;
pub const BEGIN_TOKEN: &str = "#BEGIN#";
pub const END_TOKEN: &str = "#END#";
pub const OOV_TOKEN: &str = "#OOV#";

/// Token list with `#BEGIN#`, `#END#`, `#OOV#` fixed at indices 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "VocabRecord", try_from = "VocabRecord")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    min_freq: usize,
    tokens: Vec<String>,
}

impl From<Vocabulary> for VocabRecord {
    fn from(v: Vocabulary) -> Self {
        Self {
            min_freq: v.min_freq,
            tokens: v.tokens,
        }
    }
}

impl TryFrom<VocabRecord> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabRecord) -> Result<Self> {
        Vocabulary::from_tokens(r.tokens, r.min_freq)
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from a full token list (reserved tokens first).
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        if tokens.len() < 3 || tokens[..3] != [BEGIN_TOKEN, END_TOKEN, OOV_TOKEN] {
            return Err(Error::Parse("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Maps tokens to ids, substituting `#OOV#` for unknown tokens.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(OOV))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i).map(str::to_string).ok_or(Error::TokenOutOfRange {
                    token: i,
                    size: self.len(),
                })
            })
            .collect()
    }
}

/// Keeps tokens with corpus frequency ≥ `min_freq`, ordered by
/// `(frequency desc, token asc)` after the reserved tokens.
pub fn build_vocab(corpus: &[Vec<String>], min_freq: usize) -> Result<Vocabulary> {
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in corpus {
        for t in doc {
            if ![BEGIN_TOKEN, END_TOKEN, OOV_TOKEN].contains(&t.as_str()) {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens = [BEGIN_TOKEN, END_TOKEN, OOV_TOKEN]
        .into_iter()
        .chain(kept.into_iter().map(|(t, _)| t))
        .map(str::to_string)
        .collect();
    Vocabulary::from_tokens(tokens, min_freq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_with(word: &str, times: usize) -> Vec<Vec<String>> {
        vec![vec![word.to_string(); times], vec!["other".to_string(); 25]]
    }

    #[test]
    fn frequency_threshold_is_inclusive() {
        let v = build_vocab(&corpus_with("dog", 19), 20).unwrap();
        assert_eq!(v.encode(&["dog"]), vec![OOV]);
        let v = build_vocab(&corpus_with("dog", 20), 20).unwrap();
        assert_ne!(v.encode(&["dog"]), vec![OOV]);
    }

    #[test]
    fn empty_corpus_has_reserved_tokens_only() {
        let v = build_vocab(&[], 1).unwrap();
        assert_eq!(v.tokens(), &[BEGIN_TOKEN, END_TOKEN, OOV_TOKEN]);
    }

    #[test]
    fn ordering_by_frequency_then_token() {
        let corpus = vec![vec!["b", "a", "c", "c", "b", "d"]
            .into_iter()
            .map(String::from)
            .collect()];
        let v = build_vocab(&corpus, 1).unwrap();
        assert_eq!(&v.tokens()[3..], &["b", "c", "a", "d"]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let corpus = vec![vec!["x".to_string(), "y".to_string()]];
        let v = build_vocab(&corpus, 1).unwrap();
        let ids = v.encode(&["y", "x", "y"]);
        assert_eq!(v.decode(&ids).unwrap(), vec!["y", "x", "y"]);
        assert!(v.decode(&[99]).is_err());
    }
}
