use std::collections::{BTreeMap, BTreeSet};

use super::{check_corpus, ngrams};
use crate::error::{Error, Result};

pub const CIDER_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

type Grams<'a> = BTreeMap<&'a [String], usize>;

struct TfIdf<'a> {
    vecs: Vec<BTreeMap<&'a [String], f64>>,
    norms: Vec<f64>,
    /// Bigram count, the length used by the CIDEr-D penalty.
    length: f64,
}

fn tfidf<'a>(tokens: &'a [String], df: &BTreeMap<&'a [String], usize>, log_images: f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    let mut length = 0.0;
    for n in 1..=MAX_N {
        let counts: Grams = ngrams(tokens, n);
        let mut vec = BTreeMap::new();
        let mut norm = 0.0;
        for (gram, tf) in counts {
            let d = df.get(gram).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_images - d.ln());
            norm += w * w;
            if n == 2 {
                length += tf as f64;
            }
            vec.insert(gram, w);
        }
        vecs.push(vec);
        norms.push(norm.sqrt());
    }
    TfIdf {
        vecs,
        norms,
        length,
    }
}

fn similarity(hyp: &TfIdf<'_>, reference: &TfIdf<'_>) -> f64 {
    let delta = hyp.length - reference.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..MAX_N {
        let mut val = 0.0;
        for (gram, &h) in &hyp.vecs[n] {
            if let Some(&r) = reference.vecs[n].get(gram) {
                val += h.min(r) * r;
            }
        }
        if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            val /= hyp.norms[n] * reference.norms[n];
        }
        total += val * penalty;
    }
    total / MAX_N as f64
}

/// Corpus CIDEr-D: mean over images of `10 · mean_refs mean_n sim_n`, with
/// document frequencies taken over each image's reference set.
pub fn cider_d(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    if candidates.len() < 2 {
        return Err(Error::Degenerate(
            "CIDEr-D needs at least two images for document frequencies".into(),
        ));
    }
    let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
    for refs in references {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in refs {
            for n in 1..=MAX_N {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_images = (references.len() as f64).ln();
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let hyp = tfidf(cand, &df, log_images);
        let score: f64 = refs
            .iter()
            .map(|r| similarity(&hyp, &tfidf(r, &df, log_images)))
            .sum::<f64>()
            / refs.len() as f64;
        total += 10.0 * score;
    }
    Ok(total / candidates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmetrics::tokenize;

    #[test]
    fn disjoint_candidate_scores_zero() {
        let c = vec![tokenize("x y z"), tokenize("q r")];
        let r = vec![vec![tokenize("a b c")], vec![tokenize("d e f")]];
        assert_eq!(cider_d(&c, &r).unwrap(), 0.0);
    }

    #[test]
    fn single_image_rejected() {
        assert!(cider_d(&[tokenize("a")], &[vec![tokenize("a")]]).is_err());
    }

    #[test]
    fn image_order_does_not_matter() {
        let c = vec![tokenize("a b c d"), tokenize("a e f"), tokenize("g b c")];
        let r = vec![
            vec![tokenize("a b c"), tokenize("a b d")],
            vec![tokenize("a e f g")],
            vec![tokenize("g b c"), tokenize("h")],
        ];
        let s = cider_d(&c, &r).unwrap();
        let perm = [2, 0, 1];
        let c2: Vec<_> = perm.iter().map(|&i| c[i].clone()).collect();
        let r2: Vec<_> = perm.iter().map(|&i| r[i].clone()).collect();
        assert!((cider_d(&c2, &r2).unwrap() - s).abs() < 1e-12);
        assert!(s >= 0.0);
    }
}
