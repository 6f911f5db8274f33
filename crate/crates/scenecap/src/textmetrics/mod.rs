//! Tokenization, vocabulary construction and caption metrics
//! (BLEU-1..4, ROUGE-L, CIDEr-D).

mod bleu;
mod cider;
mod rouge;
mod vocab;

pub use bleu::{bleu, bleu_upto};
pub use cider::{cider_d, CIDER_SIGMA};
pub use rouge::{lcs_length, rouge_l, ROUGE_BETA};
pub use vocab::{build_vocab, Vocabulary, BEGIN, BEGIN_TOKEN, END, END_TOKEN, OOV, OOV_TOKEN};

use crate::error::{Error, Result};

const PUNCTUATION: [char; 6] = [',', '.', '!', '?', ';', ':'];

/// Lowercases, splits on whitespace and splits `, . ! ? ; :` into their own
/// tokens.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in sentence.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if PUNCTUATION.contains(&ch) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Tokenized candidates paired with their reference sets.
pub(crate) fn check_corpus(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if candidates.len() != references.len() {
        return Err(Error::Dimension {
            what: "reference sets",
            expected: candidates.len(),
            actual: references.len(),
        });
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Empty("reference set"));
    }
    Ok(())
}

pub(crate) fn ngrams(tokens: &[String], n: usize) -> std::collections::BTreeMap<&[String], usize> {
    let mut counts = std::collections::BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(tokenize("A man, running."), vec!["a", "man", ",", "running", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  Hi!!  there "), vec!["hi", "!", "!", "there"]);
    }

    proptest! {
        #[test]
        fn tokenization_is_closed_under_rejoining(s in "[a-zA-Z ,.!?;:]{0,40}") {
            let once = tokenize(&s);
            let again = tokenize(&once.join(" "));
            prop_assert_eq!(once, again);
        }
    }
}
