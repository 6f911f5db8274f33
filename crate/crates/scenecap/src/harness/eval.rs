//! Caption metrics, teacher-forced statistics and caption/image retrieval.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::dataset::DatasetRecord;
use crate::captioner::{beam_decode, greedy_decode, CaptionModel};
use crate::error::{Error, Result};
use crate::regions::RegionSet;
use crate::scene::{scene_predict, SceneMlp, SceneVector};
use crate::textmetrics::{bleu, bleu_upto, cider_d, rouge_l, Vocabulary, ROUGE_BETA};

/// Records resolved into model inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub ids: Vec<String>,
    pub regions: Vec<RegionSet>,
    pub scenes: Vec<Option<SceneVector>>,
    /// Encoded non-empty captions per image.
    pub captions: Vec<Vec<Vec<usize>>>,
    /// Tokenized reference captions per image.
    pub references: Vec<Vec<Vec<String>>>,
}

/// Scene vector for a record: the stored one, else the scene MLP's
/// prediction from the global feature.
pub fn resolve_scene(record: &DatasetRecord, mlp: Option<&SceneMlp>) -> Result<Option<SceneVector>> {
    if let Some(s) = &record.scene {
        return Ok(Some(s.clone()));
    }
    match (mlp, &record.global_feature) {
        (Some(m), Some(g)) => Ok(Some(scene_predict(m, g)?)),
        _ => Ok(None),
    }
}

impl Prepared {
    pub fn new(
        records: &[DatasetRecord],
        vocab: &Vocabulary,
        model: &CaptionModel,
        mlp: Option<&SceneMlp>,
    ) -> Result<Self> {
        let mut out = Prepared {
            ids: Vec::new(),
            regions: Vec::new(),
            scenes: Vec::new(),
            captions: Vec::new(),
            references: Vec::new(),
        };
        for rec in records {
            let scene = if model.is_factorized() {
                let s = resolve_scene(rec, mlp)?.ok_or_else(|| {
                    Error::Config(format!("record {} has no scene vector", rec.image_id))
                })?;
                Some(s)
            } else {
                None
            };
            let references: Vec<Vec<String>> = rec
                .tokenized_captions()
                .into_iter()
                .filter(|c| !c.is_empty())
                .collect();
            out.ids.push(rec.image_id.clone());
            out.regions.push(rec.region_set()?);
            out.scenes.push(scene);
            out.captions.push(references.iter().map(|c| vocab.encode(c)).collect());
            out.references.push(references);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Total teacher-forced loss divided by the number of predicted tokens
/// (each caption contributes its length plus one for `#END#`).
pub fn mean_token_loss(model: &CaptionModel, set: &Prepared) -> Result<f64> {
    let per_image: Vec<Result<(f64, usize)>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let mut loss = 0.0;
            let mut tokens = 0;
            for cap in &set.captions[i] {
                loss += model.teacher_forced_loss(&set.regions[i], set.scenes[i].as_ref(), cap)?;
                tokens += cap.len() + 1;
            }
            Ok((loss, tokens))
        })
        .collect();
    let (mut loss, mut tokens) = (0.0, 0);
    for r in per_image {
        let (l, t) = r?;
        loss += l;
        tokens += t;
    }
    if tokens == 0 {
        return Err(Error::Empty("captions"));
    }
    Ok(loss / tokens as f64)
}

/// Fraction of teacher-forced steps (including `#END#`) whose most probable
/// token is the reference token. `scenes` overrides the prepared scene vectors.
pub fn next_token_accuracy(
    model: &CaptionModel,
    set: &Prepared,
    scenes: Option<&[Option<SceneVector>]>,
) -> Result<f64> {
    let scenes = scenes.unwrap_or(&set.scenes);
    if scenes.len() != set.len() {
        return Err(Error::Dimension {
            what: "scene vectors",
            expected: set.len(),
            actual: scenes.len(),
        });
    }
    let per_image: Vec<Result<(usize, usize)>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let (mut hits, mut total) = (0, 0);
            for cap in &set.captions[i] {
                let pass = model.teacher_forced(&set.regions[i], scenes[i].as_ref(), cap)?;
                let targets = cap.iter().chain(std::iter::once(&crate::textmetrics::END));
                for (p, t) in pass.predictions.iter().zip(targets) {
                    hits += usize::from(p == t);
                    total += 1;
                }
            }
            Ok((hits, total))
        })
        .collect();
    let (mut hits, mut total) = (0, 0);
    for r in per_image {
        let (h, t) = r?;
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::Empty("captions"));
    }
    Ok(hits as f64 / total as f64)
}

fn decode_words(vocab: &Vocabulary, tokens: &[usize]) -> Result<Vec<String>> {
    vocab.decode(tokens)
}

/// Greedy captions for every prepared image, as words.
pub fn greedy_captions(model: &CaptionModel, set: &Prepared, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Vec<String>>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| {
            let d = greedy_decode(model, &set.regions[i], set.scenes[i].as_ref(), max_len)?;
            decode_words(vocab, d.content())
        })
        .collect()
}

/// Corpus BLEU-1 of greedy captions against the references.
pub fn greedy_bleu1(model: &CaptionModel, set: &Prepared, vocab: &Vocabulary, max_len: usize) -> Result<f64> {
    let candidates = greedy_captions(model, set, vocab, max_len)?;
    bleu(&candidates, &set.references, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    /// CIDEr-D scaled by 100.
    #[serde(rename = "ciderD")]
    pub cider_d: f64,
}

impl MetricReport {
    pub fn score(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<Self> {
        let b = bleu_upto(candidates, references, 4)?;
        Ok(Self {
            bleu1: b[0],
            bleu2: b[1],
            bleu3: b[2],
            bleu4: b[3],
            rouge_l: rouge_l(candidates, references, ROUGE_BETA)?,
            cider_d: 100.0 * cider_d(candidates, references)?,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "bleu1 = {}\nbleu2 = {}\nbleu3 = {}\nbleu4 = {}\nrougeL = {}\nciderD = {}\n",
            self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.cider_d
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCaption {
    pub image_id: String,
    pub caption: String,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub captions: Vec<GeneratedCaption>,
}

/// Beam-decodes every image and yields the best hypothesis per image.
pub fn generate(
    model: &CaptionModel,
    set: &Prepared,
    vocab: &Vocabulary,
    beam: usize,
    max_len: usize,
) -> Result<Vec<GeneratedCaption>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| {
            let hyps = beam_decode(model, &set.regions[i], set.scenes[i].as_ref(), beam, max_len)?;
            let best = &hyps[0].decoded;
            Ok(GeneratedCaption {
                image_id: set.ids[i].clone(),
                caption: decode_words(vocab, best.content())?.join(" "),
                log_prob: best.log_prob,
            })
        })
        .collect()
}

/// Decodes with beam search and scores against each record's captions.
pub fn evaluate(ckpt: &Checkpoint, records: &[DatasetRecord], beam: usize, max_len: usize) -> Result<Evaluation> {
    let model = ckpt.model()?;
    let set = Prepared::new(records, &ckpt.vocabulary, &model, ckpt.scene_mlp.as_ref())?;
    if set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let captions = generate(&model, &set, &ckpt.vocabulary, beam, max_len)?;
    let candidates: Vec<Vec<String>> = captions
        .iter()
        .map(|c| c.caption.split_whitespace().map(str::to_string).collect())
        .collect();
    Ok(Evaluation {
        report: MetricReport::score(&candidates, &set.references)?,
        captions,
    })
}

/// Recall at 1/5/10 and median rank (1-based) of the true match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
    pub ranks: Vec<usize>,
}

impl RankStats {
    fn from_ranks(ranks: Vec<usize>) -> Self {
        let n = ranks.len() as f64;
        let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        let m = sorted.len();
        let median_rank = if m % 2 == 1 {
            sorted[m / 2] as f64
        } else {
            (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
        };
        Self {
            r1: recall(1),
            r5: recall(5),
            r10: recall(10),
            median_rank,
            ranks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `scores[i][j] = log P(caption j | image i)`.
    pub scores: Vec<Vec<f64>>,
    pub caption_to_image: RankStats,
    pub image_to_caption: RankStats,
}

/// 1-based rank of `target` when `scores` are sorted descending, ties by index.
fn rank_of(scores: &[f64], target: usize) -> usize {
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(k, &s)| s > scores[target] || (s == scores[target] && k < target))
        .count()
}

/// Ranks every image's first caption against every image under a uniform
/// image prior: `P(I | S) ∝ P(S | I)`.
pub fn retrieval_eval(model: &CaptionModel, set: &Prepared) -> Result<RetrievalReport> {
    let n = set.len();
    if n < 2 {
        return Err(Error::Empty("retrieval set of at least two pairs"));
    }
    let queries: Vec<&Vec<usize>> = set
        .captions
        .iter()
        .map(|c| c.first().ok_or(Error::Empty("caption")))
        .collect::<Result<_>>()?;
    let scores: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            queries
                .iter()
                .map(|cap| Ok(-model.teacher_forced_loss(&set.regions[i], set.scenes[i].as_ref(), cap)?))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let caption_to_image = (0..n)
        .map(|j| {
            let column: Vec<f64> = scores.iter().map(|row| row[j]).collect();
            rank_of(&column, j)
        })
        .collect();
    let image_to_caption = (0..n).map(|i| rank_of(&scores[i], i)).collect();
    Ok(RetrievalReport {
        caption_to_image: RankStats::from_ranks(caption_to_image),
        image_to_caption: RankStats::from_ranks(image_to_caption),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_ties_break_by_index() {
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 0), 1);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 2), 3);
        assert_eq!(rank_of(&[0.0, 2.0, 1.0], 0), 3);
    }

    #[test]
    fn rank_stats() {
        let s = RankStats::from_ranks(vec![1, 2, 6, 11]);
        assert_eq!((s.r1, s.r5, s.r10), (0.25, 0.5, 0.75));
        assert_eq!(s.median_rank, 4.0);
        assert_eq!(RankStats::from_ranks(vec![3, 1, 2]).median_rank, 2.0);
    }

    #[test]
    fn report_keys() {
        let r = MetricReport {
            bleu1: 1.0,
            bleu2: 0.5,
            bleu3: 0.25,
            bleu4: 0.0,
            rouge_l: 0.1,
            cider_d: 2.0,
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 6);
        for k in ["bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "ciderD"] {
            assert!(v.get(k).is_some(), "{k}");
            assert!(r.to_text().contains(&format!("{k} = ")));
        }
    }
}
