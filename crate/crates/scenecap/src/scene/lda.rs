//! Latent Dirichlet allocation by collapsed Gibbs sampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SceneVector;
use crate::error::{Error, Result};

pub const LDA_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LdaConfig {
    pub topics: usize,
    /// Document-topic prior; `None` means `50 / K`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl LdaConfig {
    pub fn new(topics: usize, seed: u64) -> Self {
        Self {
            topics,
            alpha: None,
            beta: 0.01,
            iterations: 200,
            seed,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.topics as f64)
    }
}

/// Fitted topic model: vocabulary, priors and integer topic-word counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub version: u32,
    pub vocabulary: Vec<String>,
    pub topics: usize,
    pub alpha: f64,
    pub beta: f64,
    /// `topics × vocabulary` counts.
    pub topic_word: Vec<Vec<u64>>,
    /// Topic of every training token, per document.
    #[serde(skip)]
    pub assignments: Vec<Vec<usize>>,
}

impl LdaModel {
    pub fn word_index(&self) -> BTreeMap<&str, usize> {
        self.vocabulary
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect()
    }

    pub fn topic_totals(&self) -> Vec<u64> {
        self.topic_word.iter().map(|row| row.iter().sum()).collect()
    }

    /// Smoothed topic-word distribution `(n_kw + β) / (n_k + Vβ)`.
    pub fn topic_distribution(&self, topic: usize) -> Vec<f64> {
        let v = self.vocabulary.len() as f64;
        let total: u64 = self.topic_word[topic].iter().sum();
        self.topic_word[topic]
            .iter()
            .map(|&n| (n as f64 + self.beta) / (total as f64 + v * self.beta))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.version != LDA_FORMAT_VERSION {
            return Err(Error::Version {
                found: model.version,
                expected: LDA_FORMAT_VERSION,
            });
        }
        if model.topic_word.len() != model.topics
            || model
                .topic_word
                .iter()
                .any(|row| row.len() != model.vocabulary.len())
        {
            return Err(Error::Parse("LDA count matrix does not match K × V".into()));
        }
        Ok(model)
    }
}

fn sample_index(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Collapsed Gibbs sampler state, exposed so that callers can observe
/// the count invariants between sweeps.
pub struct LdaSampler {
    vocabulary: Vec<String>,
    docs: Vec<Vec<usize>>,
    topics: usize,
    alpha: f64,
    beta: f64,
    assignments: Vec<Vec<usize>>,
    doc_topic: Vec<Vec<u64>>,
    topic_word: Vec<Vec<u64>>,
    topic_totals: Vec<u64>,
    rng: ChaCha8Rng,
    weights: Vec<f64>,
}

impl LdaSampler {
    pub fn new(corpus: &[Vec<String>], config: &LdaConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("LDA corpus"));
        }
        if config.topics < 2 {
            return Err(Error::Config(format!(
                "LDA needs at least 2 topics, got {}",
                config.topics
            )));
        }
        if corpus.iter().any(Vec::is_empty) {
            return Err(Error::Empty("LDA document"));
        }
        let vocabulary: Vec<String> = corpus
            .iter()
            .flatten()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<&str, usize> = vocabulary
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect();
        let docs: Vec<Vec<usize>> = corpus
            .iter()
            .map(|d| d.iter().map(|w| index[w.as_str()]).collect())
            .collect();

        let k = config.topics;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut doc_topic = vec![vec![0u64; k]; docs.len()];
        let mut topic_word = vec![vec![0u64; vocabulary.len()]; k];
        let mut topic_totals = vec![0u64; k];
        let assignments: Vec<Vec<usize>> = docs
            .iter()
            .enumerate()
            .map(|(d, doc)| {
                doc.iter()
                    .map(|&w| {
                        let z = rng.random_range(0..k);
                        doc_topic[d][z] += 1;
                        topic_word[z][w] += 1;
                        topic_totals[z] += 1;
                        z
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            vocabulary,
            docs,
            topics: k,
            alpha: config.alpha(),
            beta: config.beta,
            assignments,
            doc_topic,
            topic_word,
            topic_totals,
            rng,
            weights: vec![0.0; k],
        })
    }

    /// Resamples every token's topic once.
    pub fn sweep(&mut self) {
        let vbeta = self.vocabulary.len() as f64 * self.beta;
        for d in 0..self.docs.len() {
            for n in 0..self.docs[d].len() {
                let w = self.docs[d][n];
                let old = self.assignments[d][n];
                self.doc_topic[d][old] -= 1;
                self.topic_word[old][w] -= 1;
                self.topic_totals[old] -= 1;
                for k in 0..self.topics {
                    self.weights[k] = (self.doc_topic[d][k] as f64 + self.alpha)
                        * (self.topic_word[k][w] as f64 + self.beta)
                        / (self.topic_totals[k] as f64 + vbeta);
                }
                let new = sample_index(&mut self.rng, &self.weights);
                self.assignments[d][n] = new;
                self.doc_topic[d][new] += 1;
                self.topic_word[new][w] += 1;
                self.topic_totals[new] += 1;
            }
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.docs.iter().map(|d| d.len() as u64).sum()
    }

    /// Checks every count matrix against the current assignments.
    pub fn check_invariants(&self) -> Result<()> {
        let mut topic_word = vec![vec![0u64; self.vocabulary.len()]; self.topics];
        for (d, doc) in self.docs.iter().enumerate() {
            let mut per_doc = vec![0u64; self.topics];
            for (&w, &z) in doc.iter().zip(&self.assignments[d]) {
                per_doc[z] += 1;
                topic_word[z][w] += 1;
            }
            if per_doc != self.doc_topic[d] || per_doc.iter().sum::<u64>() != doc.len() as u64 {
                return Err(Error::Degenerate(format!("document {d} counts drifted")));
            }
        }
        if topic_word != self.topic_word {
            return Err(Error::Degenerate("topic-word counts drifted".into()));
        }
        let totals: Vec<u64> = topic_word.iter().map(|r| r.iter().sum()).collect();
        if totals != self.topic_totals || totals.iter().sum::<u64>() != self.total_tokens() {
            return Err(Error::Degenerate("topic totals drifted".into()));
        }
        Ok(())
    }

    pub fn into_model(self) -> LdaModel {
        LdaModel {
            version: LDA_FORMAT_VERSION,
            vocabulary: self.vocabulary,
            topics: self.topics,
            alpha: self.alpha,
            beta: self.beta,
            topic_word: self.topic_word,
            assignments: self.assignments,
        }
    }
}

/// Fits LDA to tokenized documents with `config.iterations` Gibbs sweeps.
pub fn lda_fit(corpus: &[Vec<String>], config: &LdaConfig) -> Result<LdaModel> {
    let mut sampler = LdaSampler::new(corpus, config)?;
    for _ in 0..config.iterations {
        sampler.sweep();
    }
    Ok(sampler.into_model())
}

/// Topic proportions of a new document with the topic-word counts held
/// fixed. Sweeps `0..burn_in` are discarded; the remaining sweeps' topic
/// counts are averaged and smoothed as `(n_k + α) / (N + Kα)`.
pub fn lda_infer(
    model: &LdaModel,
    doc: &[String],
    iterations: usize,
    burn_in: usize,
    seed: u64,
) -> Result<SceneVector> {
    let index = model.word_index();
    let words: Vec<usize> = doc
        .iter()
        .filter_map(|w| index.get(w.as_str()).copied())
        .collect();
    if words.is_empty() {
        return Err(Error::Degenerate(
            "document has no tokens in the LDA vocabulary".into(),
        ));
    }
    if iterations <= burn_in {
        return Err(Error::Config(format!(
            "inference needs more iterations ({iterations}) than burn-in sweeps ({burn_in})"
        )));
    }
    let k = model.topics;
    let vbeta = model.vocabulary.len() as f64 * model.beta;
    let totals = model.topic_totals();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<usize> = words.iter().map(|_| rng.random_range(0..k)).collect();
    let mut counts = vec![0u64; k];
    for &t in &z {
        counts[t] += 1;
    }
    let mut accumulated = vec![0.0; k];
    let mut weights = vec![0.0; k];
    for sweep in 0..iterations {
        for (n, &w) in words.iter().enumerate() {
            counts[z[n]] -= 1;
            for t in 0..k {
                weights[t] = (counts[t] as f64 + model.alpha)
                    * (model.topic_word[t][w] as f64 + model.beta)
                    / (totals[t] as f64 + vbeta);
            }
            z[n] = sample_index(&mut rng, &weights);
            counts[z[n]] += 1;
        }
        if sweep >= burn_in {
            for (a, &c) in accumulated.iter_mut().zip(&counts) {
                *a += c as f64;
            }
        }
    }
    let kept = (iterations - burn_in) as f64;
    let n = words.len() as f64;
    let denom = n + k as f64 * model.alpha;
    let mut s: Vec<f64> = accumulated
        .iter()
        .map(|a| (a / kept + model.alpha) / denom)
        .collect();
    let total: f64 = s.iter().sum();
    for v in &mut s {
        *v /= total;
    }
    SceneVector::new(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn empty_corpus_and_small_k_rejected() {
        assert!(lda_fit(&[], &LdaConfig::new(2, 0)).is_err());
        assert!(lda_fit(&[toks(&["a"])], &LdaConfig::new(1, 0)).is_err());
    }

    #[test]
    fn counts_conserved_and_deterministic() {
        let corpus = vec![toks(&["a", "b", "a"]), toks(&["c", "d"]), toks(&["a", "d", "d"])];
        let cfg = LdaConfig {
            iterations: 20,
            ..LdaConfig::new(3, 42)
        };
        let m1 = lda_fit(&corpus, &cfg).unwrap();
        let m2 = lda_fit(&corpus, &cfg).unwrap();
        assert_eq!(m1.topic_word, m2.topic_word);
        assert_eq!(m1.topic_totals().iter().sum::<u64>(), 8);
    }

    #[test]
    fn infer_requires_known_tokens() {
        let corpus = vec![toks(&["a", "b"]), toks(&["c", "d"])];
        let m = lda_fit(&corpus, &LdaConfig::new(2, 1)).unwrap();
        assert!(lda_infer(&m, &toks(&["zzz"]), 50, 25, 0).is_err());
        let s = lda_infer(&m, &toks(&["a", "zzz"]), 50, 25, 0).unwrap();
        assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip_checks_version() {
        let corpus = vec![toks(&["a", "b"]), toks(&["c", "d"])];
        let m = lda_fit(&corpus, &LdaConfig::new(2, 1)).unwrap();
        let back = LdaModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.topic_word, m.topic_word);
        let bumped = m.to_json().unwrap().replace("\"version\":1", "\"version\":9");
        assert!(matches!(LdaModel::from_json(&bumped), Err(Error::Version { .. })));
    }
}
