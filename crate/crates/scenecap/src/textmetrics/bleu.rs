use super::{check_corpus, ngrams};
use crate::error::{Error, Result};

/// Corpus BLEU for orders `1..=max_n`: element `k` is BLEU-(k+1).
///
/// Clipped n-gram counts are pooled over the corpus; the brevity penalty
/// uses the reference length closest to each candidate (shorter on ties).
/// An order with zero matches scores 0 with no smoothing.
pub fn bleu_upto(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    max_n: usize,
) -> Result<Vec<f64>> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::Config(format!("BLEU order must be 1..=4, got {max_n}")));
    }
    check_corpus(candidates, references)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=max_n {
            let counts = ngrams(cand, n);
            let ref_counts: Vec<_> = refs.iter().map(|r| ngrams(r, n)).collect();
            for (gram, &c) in &counts {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[n - 1] += c.min(max_ref);
                total[n - 1] += c;
            }
        }
    }
    let brevity = if cand_len == 0 {
        0.0
    } else if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        let score = if zero {
            0.0
        } else {
            brevity * (log_sum / (n + 1) as f64).exp()
        };
        scores.push(score);
    }
    Ok(scores)
}

/// Corpus BLEU-`n`.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    Ok(*bleu_upto(candidates, references, n)?.last().expect("n >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmetrics::tokenize;

    #[test]
    fn identity_scores_one() {
        let c = vec![tokenize("a dog runs on the grass")];
        let r = vec![vec![tokenize("a dog runs on the grass")]];
        for n in 1..=4 {
            assert!((bleu(&c, &r, n).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn short_candidate_pays_brevity_penalty() {
        let c = vec![tokenize("a b")];
        let r = vec![vec![tokenize("a b c")]];
        let b = bleu(&c, &r, 1).unwrap();
        assert!((b - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn disjoint_scores_zero() {
        let c = vec![tokenize("x y z")];
        let r = vec![vec![tokenize("a b c")]];
        assert_eq!(bleu(&c, &r, 1).unwrap(), 0.0);
        assert_eq!(bleu(&c, &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(bleu(&[], &[], 1).is_err());
        assert!(bleu(&[tokenize("a")], &[vec![tokenize("a")]], 5).is_err());
        assert!(bleu(&[tokenize("a")], &[], 1).is_err());
    }
}
