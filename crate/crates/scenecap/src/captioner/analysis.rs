//! Attention heatmaps, patch-word matching and scene distortion.

use super::{beam_decode, CaptionModel, Decoded};
use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::regions::{BoundingBox, RegionSet};
use crate::scene::SceneVector;

/// Region assigned to a word.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMatch {
    pub region: usize,
    pub bbox: BoundingBox,
    /// Position of the word in the sentence (0-based).
    pub position: usize,
    pub weight: f64,
}

/// Region with the largest attention weight at the step that emits the
/// first occurrence of `word` in `sentence`.
pub fn patch_word_match(
    model: &CaptionModel,
    regions: &RegionSet,
    scene: Option<&SceneVector>,
    sentence: &[usize],
    word: usize,
) -> Result<PatchMatch> {
    if !model.has_attention() {
        return Err(Error::Config("model has no region attention".into()));
    }
    let position = sentence
        .iter()
        .position(|&t| t == word)
        .ok_or_else(|| Error::WordAbsent(word.to_string()))?;
    let pass = model.teacher_forced(regions, scene, sentence)?;
    let weights = &pass.attention[position];
    let region = weights.argmax();
    Ok(PatchMatch {
        region,
        bbox: regions.boxes()[region],
        position,
        weight: weights.as_slice()[region],
    })
}

/// Per-pixel attention mass for one step, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl HeatmapGrid {
    pub fn value(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    /// Plain-text graymap scaled so the largest cell maps to 255.
    pub fn to_pgm(&self) -> String {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.values.chunks(self.width as usize) {
            let line: Vec<String> = row
                .iter()
                .map(|&v| {
                    let g = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                    (g as u8).to_string()
                })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// One grid per step; cell `(x, y)` holds the summed weight of every region
/// whose box contains it.
pub fn attention_heatmap(
    weights_per_step: &[AttentionWeights],
    boxes: &[BoundingBox],
    width: u32,
    height: u32,
) -> Result<Vec<HeatmapGrid>> {
    if width == 0 || height == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    for b in boxes {
        b.check_within(width, height)?;
    }
    weights_per_step
        .iter()
        .map(|w| {
            if w.len() != boxes.len() {
                return Err(Error::Dimension {
                    what: "attention weights",
                    expected: boxes.len(),
                    actual: w.len(),
                });
            }
            let mut values = vec![0.0; width as usize * height as usize];
            for (b, &p) in boxes.iter().zip(w.as_slice()) {
                for y in b.y..b.y + b.height {
                    let row = y as usize * width as usize;
                    for x in b.x..b.x + b.width {
                        values[row + x as usize] += p;
                    }
                }
            }
            Ok(HeatmapGrid {
                width,
                height,
                values,
            })
        })
        .collect()
}

/// Beam-decodes with the scene vector replaced by `one-hot(topic)`.
pub fn distort_scene_decode(
    model: &CaptionModel,
    regions: &RegionSet,
    topic: usize,
    beam: usize,
    max_len: usize,
) -> Result<Decoded> {
    let topics = model.config.scene.as_ref().ok_or(Error::NotFactorized)?.topics;
    let s = SceneVector::one_hot(topics, topic)?;
    let hyps = beam_decode(model, regions, Some(&s), beam, max_len)?;
    Ok(hyps.into_iter().next().expect("beam search yields a hypothesis").decoded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::tests::{toy_config, toy_regions};

    #[test]
    fn heatmap_examples() {
        let full = [BoundingBox::new(0, 0, 4, 3)];
        let grids = attention_heatmap(&[AttentionWeights::new(vec![1.0])], &full, 4, 3).unwrap();
        assert!(grids[0].values.iter().all(|&v| v == 1.0));

        let boxes = [
            BoundingBox::new(0, 0, 2, 2),
            BoundingBox::new(1, 1, 2, 2),
            BoundingBox::new(3, 0, 1, 1),
        ];
        let w = AttentionWeights::new(vec![0.5, 0.3, 0.2]);
        let g = &attention_heatmap(&[w], &boxes, 4, 4).unwrap()[0];
        assert_eq!(g.value(1, 1), 0.8);
        assert_eq!(g.value(0, 0), 0.5);
        assert_eq!(g.value(3, 0), 0.2);
        assert_eq!(g.value(0, 3), 0.0);
        assert!(g.to_pgm().starts_with("P2\n4 4\n255\n"));
    }

    #[test]
    fn heatmap_rejects_out_of_bounds() {
        let boxes = [BoundingBox::new(3, 0, 2, 1)];
        assert!(attention_heatmap(&[AttentionWeights::new(vec![1.0])], &boxes, 4, 4).is_err());
    }

    #[test]
    fn pgm_scales_to_max() {
        let g = HeatmapGrid {
            width: 2,
            height: 1,
            values: vec![0.25, 0.5],
        };
        assert_eq!(g.to_pgm(), "P2\n2 1\n255\n128 255\n");
    }

    #[test]
    fn single_region_matches_zero() {
        let model = CaptionModel::new(toy_config(true, false), 1).unwrap();
        let regions = toy_regions(4, 1, 4);
        let m = patch_word_match(&model, &regions, None, &[5, 6, 7], 6).unwrap();
        assert_eq!((m.region, m.position), (0, 1));
        assert!(matches!(
            patch_word_match(&model, &regions, None, &[5, 6], 9),
            Err(Error::WordAbsent(_))
        ));
    }

    #[test]
    fn identical_regions_tie_to_lowest() {
        let model = CaptionModel::new(toy_config(true, false), 1).unwrap();
        let one = toy_regions(4, 1, 4).to_regions().remove(0);
        let regions = RegionSet::new(vec![one; 3]).unwrap();
        assert_eq!(patch_word_match(&model, &regions, None, &[5, 6], 6).unwrap().region, 0);
    }

    #[test]
    fn distortion_requires_factorization() {
        let regions = toy_regions(0, 2, 4);
        let plain = CaptionModel::new(toy_config(true, false), 0).unwrap();
        assert!(matches!(
            distort_scene_decode(&plain, &regions, 0, 2, 5),
            Err(Error::NotFactorized)
        ));
        let sf = CaptionModel::new(toy_config(true, true), 0).unwrap();
        assert!(distort_scene_decode(&sf, &regions, 3, 2, 5).is_err());
        let a = distort_scene_decode(&sf, &regions, 1, 3, 5).unwrap();
        let s = SceneVector::one_hot(3, 1).unwrap();
        let b = beam_decode(&sf, &regions, Some(&s), 3, 5).unwrap();
        assert_eq!(a.tokens, b[0].decoded.tokens);
    }
}
