use super::check_corpus;
use crate::error::Result;

pub const ROUGE_BETA: f64 = 1.2;

/// Longest common subsequence length by dynamic programming.
pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f_lcs(cand: &[String], reference: &[String], beta: f64) -> f64 {
    let lcs = lcs_length(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let recall = lcs as f64 / reference.len() as f64;
    let precision = lcs as f64 / cand.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * recall * precision / (recall + b2 * precision)
}

/// Mean over candidates of the best LCS F-measure against their references.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], beta: f64) -> Result<f64> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            refs.iter()
                .map(|r| f_lcs(c, r, beta))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / candidates.len() as f64)
}
