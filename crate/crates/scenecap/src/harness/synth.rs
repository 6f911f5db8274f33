//! Synthetic caption corpora with controllable scene and region structure.
//!
//! Every scene names each concept with its own word, so scene
//! sub-vocabularies are disjoint. An image places `slots` concepts left to
//! right; its caption lists them in that order. Each object region carries
//! the concept's code plus noise and its geometry, so region attention can
//! recover both identity and order. Distractor regions carry clutter.
//!
//! A scene vector `s` drives word choice: each caption token draws its scene
//! from `s` independently (the topic-model generative process). Mixed images
//! use a two-scene blend and occur only in the training split; validation
//! and test images are scene-consistent (one-hot `s`).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetRecord, Splits};
use crate::error::{Error, Result};
use crate::regions::{geometry_features, BoundingBox, Region};
use crate::scene::SceneVector;

const SLOT_WIDTH: u32 = 16;
const IMAGE_HEIGHT: u32 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub scenes: usize,
    /// Concepts (and therefore words) per scene.
    pub vocab_per_scene: usize,
    /// Objects per image, which is also the caption length.
    pub slots: usize,
    /// Regions per image (objects plus distractors).
    pub regions: usize,
    /// Width of the concept code; region features add 5 geometry values.
    pub feature_dim: usize,
    pub global_dim: usize,
    pub noise: f64,
    /// Fraction of training images with a two-scene blend.
    pub mixed_fraction: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            scenes: 2,
            vocab_per_scene: 8,
            slots: 4,
            regions: 8,
            feature_dim: 8,
            global_dim: 8,
            noise: 0.1,
            mixed_fraction: 0.5,
            train: 400,
            val: 50,
            test: 100,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scenes", self.scenes),
            ("vocab_per_scene", self.vocab_per_scene),
            ("slots", self.slots),
            ("regions", self.regions),
            ("feature_dim", self.feature_dim),
            ("global_dim", self.global_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.slots > self.vocab_per_scene || self.slots > self.regions {
            return Err(Error::Config(
                "slots must not exceed vocab_per_scene or regions".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mixed_fraction) || !(self.noise >= 0.0) {
            return Err(Error::Config("mixed_fraction in [0, 1] and noise >= 0 required".into()));
        }
        Ok(())
    }

    /// Region feature width including geometry.
    pub fn region_dim(&self) -> usize {
        self.feature_dim + 5
    }
}

/// Word naming `concept` in `scene`.
pub fn scene_word(scene: usize, concept: usize) -> String {
    format!("s{scene}w{concept}")
}

pub fn scene_words(spec: &SynthSpec, scene: usize) -> Vec<String> {
    (0..spec.vocab_per_scene).map(|c| scene_word(scene, c)).collect()
}

/// Scene index of a synthetic word, if it is one.
pub fn word_scene(word: &str) -> Option<usize> {
    let rest = word.strip_prefix('s')?;
    let (scene, concept) = rest.split_once('w')?;
    concept.parse::<usize>().ok()?;
    scene.parse().ok()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

impl SynthData {
    pub fn all(&self) -> Vec<DatasetRecord> {
        [&self.train, &self.val, &self.test]
            .into_iter()
            .flatten()
            .cloned()
            .collect()
    }

    pub fn splits(&self) -> Splits {
        let ids = |v: &[DatasetRecord]| v.iter().map(|r| r.image_id.clone()).collect();
        Splits(
            [
                ("test".to_string(), ids(&self.test)),
                ("train".to_string(), ids(&self.train)),
                ("val".to_string(), ids(&self.val)),
            ]
            .into_iter()
            .collect(),
        )
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

struct World {
    concept_codes: Vec<Vec<f64>>,
    scene_codes: Vec<Vec<f64>>,
}

fn image(spec: &SynthSpec, world: &World, rng: &mut ChaCha8Rng, id: String, mixed: bool) -> Result<DatasetRecord> {
    let mut s = vec![0.0; spec.scenes];
    let main = rng.random_range(0..spec.scenes);
    if mixed && spec.scenes > 1 {
        let mut other = rng.random_range(0..spec.scenes - 1);
        if other >= main {
            other += 1;
        }
        let lambda = rng.random_range(0.2..0.8);
        s[main] = lambda;
        s[other] = 1.0 - lambda;
    } else {
        s[main] = 1.0;
    }
    let scene_dist = WeightedIndex::new(&s).map_err(|e| Error::Degenerate(e.to_string()))?;

    let mut concepts: Vec<usize> = (0..spec.vocab_per_scene).collect();
    concepts.shuffle(rng);
    concepts.truncate(spec.slots);
    let words: Vec<String> = concepts
        .iter()
        .map(|&c| scene_word(scene_dist.sample(rng), c))
        .collect();

    let width = SLOT_WIDTH * spec.slots as u32;
    let mut regions = Vec::with_capacity(spec.regions);
    for (slot, &c) in concepts.iter().enumerate() {
        let bbox = BoundingBox::new(slot as u32 * SLOT_WIDTH, 0, SLOT_WIDTH, IMAGE_HEIGHT);
        let mut feature: Vec<f64> = world.concept_codes[c]
            .iter()
            .zip(gaussian(rng, spec.feature_dim, spec.noise))
            .map(|(a, b)| a + b)
            .collect();
        feature.extend(geometry_features(&bbox, width, IMAGE_HEIGHT)?);
        regions.push(Region { feature, bbox });
    }
    while regions.len() < spec.regions {
        let w = rng.random_range(4..=SLOT_WIDTH);
        let h = rng.random_range(4..=IMAGE_HEIGHT);
        let bbox = BoundingBox::new(rng.random_range(0..=width - w), rng.random_range(0..=IMAGE_HEIGHT - h), w, h);
        let mut feature = gaussian(rng, spec.feature_dim, 0.5);
        feature.extend(geometry_features(&bbox, width, IMAGE_HEIGHT)?);
        regions.push(Region { feature, bbox });
    }
    regions.shuffle(rng);

    let mut global = vec![0.0; spec.global_dim];
    for (k, &w) in s.iter().enumerate() {
        for (g, v) in global.iter_mut().zip(&world.scene_codes[k]) {
            *g += w * v;
        }
    }
    for (g, n) in global.iter_mut().zip(gaussian(rng, spec.global_dim, spec.noise)) {
        *g += n;
    }

    Ok(DatasetRecord {
        image_id: id,
        width: Some(width),
        height: Some(IMAGE_HEIGHT),
        global_feature: Some(global),
        regions,
        captions: vec![words.join(" ")],
        scene: Some(SceneVector::new(s)?),
    })
}

/// Deterministic train/validation/test corpora for `spec`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World {
        concept_codes: (0..spec.vocab_per_scene)
            .map(|_| gaussian(&mut rng, spec.feature_dim, 1.0))
            .collect(),
        scene_codes: (0..spec.scenes)
            .map(|_| gaussian(&mut rng, spec.global_dim, 1.0))
            .collect(),
    };
    let mut split = |name: &str, n: usize, allow_mixed: bool| -> Result<Vec<DatasetRecord>> {
        (0..n)
            .map(|i| {
                let mixed = allow_mixed && rng.random_bool(spec.mixed_fraction);
                image(spec, &world, &mut rng, format!("{name}{i:05}"), mixed)
            })
            .collect()
    };
    Ok(SynthData {
        train: split("train", spec.train, true)?,
        val: split("val", spec.val, false)?,
        test: split("test", spec.test, false)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmetrics::build_vocab;

    #[test]
    fn deterministic() {
        let spec = SynthSpec {
            train: 20,
            val: 5,
            test: 5,
            ..SynthSpec::default()
        };
        assert_eq!(synth_dataset(&spec).unwrap(), synth_dataset(&spec).unwrap());
        let other = SynthSpec { seed: 1, ..spec.clone() };
        assert_ne!(synth_dataset(&other).unwrap().train, synth_dataset(&spec).unwrap().train);
    }

    #[test]
    fn consistent_scenes_use_one_sub_vocabulary() {
        let spec = SynthSpec {
            noise: 0.0,
            mixed_fraction: 0.0,
            train: 50,
            val: 0,
            test: 10,
            ..SynthSpec::default()
        };
        let data = synth_dataset(&spec).unwrap();
        for rec in data.all() {
            let scene = rec.scene.as_ref().unwrap().argmax();
            assert_eq!(rec.scene.as_ref().unwrap().as_slice()[scene], 1.0);
            for w in &rec.tokenized_captions()[0] {
                assert_eq!(word_scene(w), Some(scene));
            }
        }
        let a = scene_words(&spec, 0);
        assert!(scene_words(&spec, 1).iter().all(|w| !a.contains(w)));
    }

    #[test]
    fn captions_survive_vocab_and_regions_fit() {
        let spec = SynthSpec {
            train: 30,
            val: 5,
            test: 5,
            ..SynthSpec::default()
        };
        let data = synth_dataset(&spec).unwrap();
        let corpus: Vec<Vec<String>> = data.all().iter().flat_map(|r| r.tokenized_captions()).collect();
        let vocab = build_vocab(&corpus, 1).unwrap();
        for rec in data.all() {
            assert!(!rec.encoded_captions(&vocab)[0].contains(&crate::textmetrics::OOV));
            assert_eq!(rec.regions.len(), spec.regions);
            let (w, h) = rec.image_size().unwrap();
            for r in &rec.regions {
                assert!(r.bbox.within(w, h));
                assert_eq!(r.feature.len(), spec.region_dim());
            }
        }
        assert!(data.val.iter().chain(&data.test).all(|r| r.scene.as_ref().unwrap().as_slice().contains(&1.0)));
    }

    #[test]
    fn word_scene_parses() {
        assert_eq!(word_scene("s1w3"), Some(1));
        assert_eq!(word_scene("cat"), None);
        assert_eq!(word_scene("s1wx"), None);
    }
}
