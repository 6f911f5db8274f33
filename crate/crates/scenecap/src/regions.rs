//! Region sets: geometry features, objectness scoring and top-R selection
//! under coverage and size-diversity constraints.

use numcore::{AdamConfig, AdamState, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_REGION_COUNT: usize = 30;
pub const COVERAGE_THRESHOLD: f64 = 0.95;
const SIZE_STRATA: usize = 4;

/// Axis-aligned box in pixel units; `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.width && py >= self.y && py < self.y + self.height
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.width > 0
            && self.height > 0
            && self.x as u64 + self.width as u64 <= width as u64
            && self.y as u64 + self.height as u64 <= height as u64
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        if self.within(width, height) {
            Ok(())
        } else {
            Err(Error::BoxOutOfBounds {
                bbox: *self,
                width,
                height,
            })
        }
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.width).min(other.x + other.width);
        let y1 = (self.y + self.height).min(other.y + other.height);
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) as u64 * (y1 - y0) as u64
        }
    }
}

/// Candidate box with its ingested feature vector and optional objectness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// One row of a candidate file: a candidate tagged with its image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    #[serde(flatten)]
    pub candidate: CandidateBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub feature: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// The regions of one image; features stacked as an `R × D` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    features: Tensor,
    boxes: Vec<BoundingBox>,
}

impl RegionSet {
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::Empty("region set"));
        }
        let dim = regions[0].feature.len();
        if dim == 0 {
            return Err(Error::Empty("region feature"));
        }
        let mut data = Vec::with_capacity(regions.len() * dim);
        let mut boxes = Vec::with_capacity(regions.len());
        for r in regions {
            if r.feature.len() != dim {
                return Err(Error::Dimension {
                    what: "region feature",
                    expected: dim,
                    actual: r.feature.len(),
                });
            }
            data.extend_from_slice(&r.feature);
            boxes.push(r.bbox);
        }
        let features = Tensor::matrix(boxes.len(), dim, data)?;
        Ok(Self { features, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    pub fn to_regions(&self) -> Vec<Region> {
        self.boxes
            .iter()
            .enumerate()
            .map(|(i, b)| Region {
                feature: self.feature(i).to_vec(),
                bbox: *b,
            })
            .collect()
    }

    /// Arithmetic mean of the region features.
    pub fn mean_feature(&self) -> Vec<f64> {
        let r = self.len() as f64;
        let mut mean = vec![0.0; self.feature_dim()];
        for i in 0..self.len() {
            for (m, x) in mean.iter_mut().zip(self.feature(i)) {
                *m += x / r;
            }
        }
        mean
    }

    /// Reorders regions by `order` (a permutation of `0..R`).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        Self::new(order.iter().map(|&i| self.to_regions()[i].clone()).collect())
    }
}

/// `(cx/W, cy/H, w/W, h/H, wh/(WH))` for a box in a `W × H` image.
pub fn geometry_features(bbox: &BoundingBox, image_width: u32, image_height: u32) -> Result<[f64; 5]> {
    if image_width == 0 || image_height == 0 {
        return Err(Error::Degenerate("image has a zero dimension".into()));
    }
    bbox.check_within(image_width, image_height)?;
    let (iw, ih) = (image_width as f64, image_height as f64);
    let (x, y, w, h) = (
        bbox.x as f64,
        bbox.y as f64,
        bbox.width as f64,
        bbox.height as f64,
    );
    Ok([
        (x + w / 2.0) / iw,
        (y + h / 2.0) / ih,
        w / iw,
        h / ih,
        (w * h) / (iw * ih),
    ])
}

/// Region whose feature is the ingested vector followed by the five
/// geometry values.
pub fn region_from_candidate(c: &CandidateBox, image_width: u32, image_height: u32) -> Result<Region> {
    let geo = geometry_features(&c.bbox, image_width, image_height)?;
    let mut feature = c.feature.clone();
    feature.extend_from_slice(&geo);
    Ok(Region {
        feature,
        bbox: c.bbox,
    })
}

/// Fraction of `positive`'s area covered by `candidate`; the overlap measure
/// used when mining negatives for the objectness classifier.
pub fn overlap_with_positive(candidate: &BoundingBox, positive: &BoundingBox) -> f64 {
    candidate.intersection_area(positive) as f64 / positive.area() as f64
}

/// Logistic-regression objectness model, `score = σ(w·x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectnessModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ObjectnessModel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::Dimension {
                what: "objectness feature",
                expected: self.weights.len(),
                actual: x.len(),
            });
        }
        Ok(sigmoid(self.logit(x)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectnessTraining {
    pub adam: AdamConfig,
    pub epochs: usize,
}

impl Default for ObjectnessTraining {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            epochs: 500,
        }
    }
}

/// Fits the objectness classifier by full-batch ADAM on mean binary
/// cross-entropy from zero weights (deterministic, no seed needed).
pub fn objectness_train(
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    training: ObjectnessTraining,
) -> Result<ObjectnessModel> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Degenerate(
            "objectness training needs both positive and negative examples".into(),
        ));
    }
    let dim = positives[0].len();
    if dim == 0 {
        return Err(Error::Empty("objectness feature"));
    }
    let examples: Vec<(&[f64], f64)> = positives
        .iter()
        .map(|x| (x.as_slice(), 1.0))
        .chain(negatives.iter().map(|x| (x.as_slice(), 0.0)))
        .collect();
    if let Some((x, _)) = examples.iter().find(|(x, _)| x.len() != dim) {
        return Err(Error::Dimension {
            what: "objectness feature",
            expected: dim,
            actual: x.len(),
        });
    }

    let mut w = Tensor::vector(vec![0.0; dim]);
    let mut b = Tensor::scalar(0.0);
    let mut adam = AdamState::new(training.adam, [&w, &b]);
    let n = examples.len() as f64;
    for _ in 0..training.epochs {
        let model = ObjectnessModel {
            weights: w.data().to_vec(),
            bias: b.item(),
        };
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for (x, y) in &examples {
            let err = (sigmoid(model.logit(x)) - y) / n;
            for (g, v) in gw.iter_mut().zip(x.iter()) {
                *g += err * v;
            }
            gb += err;
        }
        adam.step(&mut [&mut w, &mut b], &[Tensor::vector(gw), Tensor::scalar(gb)])?;
    }
    Ok(ObjectnessModel {
        weights: w.data().to_vec(),
        bias: b.item(),
    })
}

/// Per-pixel cover counts for a set of boxes.
struct CoverGrid {
    width: u32,
    counts: Vec<u32>,
    covered: u64,
}

impl CoverGrid {
    fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            counts: vec![0; width as usize * height as usize],
            covered: 0,
        }
    }

    fn pixels(b: &BoundingBox) -> impl Iterator<Item = (u32, u32)> + '_ {
        (b.y..b.y + b.height).flat_map(move |y| (b.x..b.x + b.width).map(move |x| (x, y)))
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    fn add(&mut self, b: &BoundingBox) {
        for (x, y) in Self::pixels(b) {
            let i = self.idx(x, y);
            if self.counts[i] == 0 {
                self.covered += 1;
            }
            self.counts[i] += 1;
        }
    }

    fn remove(&mut self, b: &BoundingBox) {
        for (x, y) in Self::pixels(b) {
            let i = self.idx(x, y);
            self.counts[i] -= 1;
            if self.counts[i] == 0 {
                self.covered -= 1;
            }
        }
    }

    /// Covered pixel count after removing `out` and adding `inn`.
    fn covered_after_swap(&self, out: &BoundingBox, inn: &BoundingBox) -> u64 {
        let lost = Self::pixels(out)
            .filter(|&(x, y)| self.counts[self.idx(x, y)] == 1)
            .count() as u64;
        let gained = Self::pixels(inn)
            .filter(|&(x, y)| {
                let c = self.counts[self.idx(x, y)];
                c == 0 || (c == 1 && out.contains(x, y))
            })
            .count() as u64;
        self.covered - lost + gained
    }
}

/// Fraction of the image covered by the union of `boxes`.
pub fn coverage(boxes: &[BoundingBox], image_width: u32, image_height: u32) -> Result<f64> {
    let mut grid = CoverGrid::new(image_width, image_height);
    for b in boxes {
        b.check_within(image_width, image_height)?;
        grid.add(b);
    }
    Ok(grid.covered as f64 / (image_width as f64 * image_height as f64))
}

/// Area-quartile stratum (0 = smallest) of each candidate.
pub fn size_strata(candidates: &[CandidateBox]) -> Vec<usize> {
    let n = candidates.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (candidates[i].bbox.area(), i));
    let mut strata = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        strata[i] = rank * SIZE_STRATA / n;
    }
    strata
}

/// Result of region selection: indices into the candidate list, in
/// selection order, plus the achieved coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub coverage: f64,
}

/// Picks `min(R, #candidates)` scored candidates.
///
/// Candidates are split into four area-quartile strata; within each stratum
/// they are ranked by descending score with seeded shuffling among equal
/// scores, and strata are visited round-robin. Swaps then trade selected
/// boxes for unselected ones until the union covers at least 95% of the
/// image, without dropping below three represented strata when three or
/// more are populated.
pub fn select_regions(
    candidates: &[CandidateBox],
    r: usize,
    image_width: u32,
    image_height: u32,
    seed: u64,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if r == 0 {
        return Err(Error::Config("region count must be positive".into()));
    }
    if image_width == 0 || image_height == 0 {
        return Err(Error::Degenerate("image has a zero dimension".into()));
    }
    for c in candidates {
        c.bbox.check_within(image_width, image_height)?;
    }
    let total = image_width as f64 * image_height as f64;
    let all: Vec<BoundingBox> = candidates.iter().map(|c| c.bbox).collect();
    let union = coverage(&all, image_width, image_height)?;
    if union < COVERAGE_THRESHOLD {
        return Err(Error::Coverage {
            achieved: union,
            required: COVERAGE_THRESHOLD,
        });
    }

    let strata = size_strata(candidates);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let score = |i: usize| candidates[i].score.unwrap_or(0.0);
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); SIZE_STRATA];
    for (i, &s) in strata.iter().enumerate() {
        lists[s].push(i);
    }
    for list in &mut lists {
        list.shuffle(&mut rng);
        list.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
    }
    let populated = lists.iter().filter(|l| !l.is_empty()).count();
    let mut stratum_order: Vec<usize> = (0..SIZE_STRATA).filter(|&s| !lists[s].is_empty()).collect();
    stratum_order.sort_by(|&a, &b| score(lists[b][0]).total_cmp(&score(lists[a][0])).then(a.cmp(&b)));

    let target = r.min(candidates.len());
    let mut selected = Vec::with_capacity(target);
    let mut cursors = [0usize; SIZE_STRATA];
    while selected.len() < target {
        for &s in &stratum_order {
            if selected.len() == target {
                break;
            }
            if cursors[s] < lists[s].len() {
                selected.push(lists[s][cursors[s]]);
                cursors[s] += 1;
            }
        }
    }

    let mut grid = CoverGrid::new(image_width, image_height);
    for &i in &selected {
        grid.add(&candidates[i].bbox);
    }
    let required_strata = if populated >= 3 { 3.min(target) } else { 0 };
    let strata_count = |sel: &[usize]| {
        let mut seen = [false; SIZE_STRATA];
        for &i in sel {
            seen[strata[i]] = true;
        }
        seen.iter().filter(|&&b| b).count()
    };

    while (grid.covered as f64) / total < COVERAGE_THRESHOLD {
        let mut in_selection = vec![false; candidates.len()];
        for &i in &selected {
            in_selection[i] = true;
        }
        // Victims in ascending score order, replacements in descending score.
        let mut victims: Vec<usize> = (0..selected.len()).collect();
        victims.sort_by(|&a, &b| score(selected[a]).total_cmp(&score(selected[b])).then(a.cmp(&b)));
        let mut outside: Vec<usize> = (0..candidates.len()).filter(|&i| !in_selection[i]).collect();
        outside.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));

        let mut best: Option<(u64, usize, usize)> = None;
        for &slot in &victims {
            let out = &candidates[selected[slot]].bbox;
            for &c in &outside {
                let mut trial = selected.clone();
                trial[slot] = c;
                if strata_count(&trial) < required_strata {
                    continue;
                }
                let after = grid.covered_after_swap(out, &candidates[c].bbox);
                if best.is_none_or(|(b, _, _)| after > b) {
                    best = Some((after, slot, c));
                }
            }
        }
        match best {
            Some((after, slot, c)) if after > grid.covered => {
                grid.remove(&candidates[selected[slot]].bbox);
                grid.add(&candidates[c].bbox);
                selected[slot] = c;
            }
            _ => {
                return Err(Error::Coverage {
                    achieved: grid.covered as f64 / total,
                    required: COVERAGE_THRESHOLD,
                })
            }
        }
    }
    Ok(Selection {
        indices: selected,
        coverage: grid.covered as f64 / total,
    })
}

/// Selection followed by geometry augmentation into a [`RegionSet`].
pub fn build_region_set(
    candidates: &[CandidateBox],
    r: usize,
    image_width: u32,
    image_height: u32,
    seed: u64,
) -> Result<RegionSet> {
    let selection = select_regions(candidates, r, image_width, image_height, seed)?;
    RegionSet::new(
        selection
            .indices
            .iter()
            .map(|&i| region_from_candidate(&candidates[i], image_width, image_height))
            .collect::<Result<_>>()?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cand(x: u32, y: u32, w: u32, h: u32, score: f64) -> CandidateBox {
        CandidateBox {
            bbox: BoundingBox::new(x, y, w, h),
            feature: vec![score],
            score: Some(score),
        }
    }

    #[test]
    fn geometry_full_image() {
        let g = geometry_features(&BoundingBox::new(0, 0, 100, 100), 100, 100).unwrap();
        assert_eq!(g, [0.5, 0.5, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn geometry_centered_half_box() {
        let g = geometry_features(&BoundingBox::new(25, 25, 50, 50), 100, 100).unwrap();
        assert_eq!(g, [0.5, 0.5, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn geometry_zero_image_rejected() {
        assert!(geometry_features(&BoundingBox::new(0, 0, 1, 1), 0, 10).is_err());
    }

    #[test]
    fn geometry_translation_changes_only_center() {
        let a = geometry_features(&BoundingBox::new(10, 20, 30, 15), 200, 100).unwrap();
        let b = geometry_features(&BoundingBox::new(17, 25, 30, 15), 200, 100).unwrap();
        assert!((b[0] - a[0] - 7.0 / 200.0).abs() < 1e-15);
        assert!((b[1] - a[1] - 5.0 / 100.0).abs() < 1e-15);
        assert_eq!(&a[2..], &b[2..]);
    }

    #[test]
    fn geometry_values_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let (iw, ih) = (rng.random_range(1..300), rng.random_range(1..300));
            let w = rng.random_range(1..=iw);
            let h = rng.random_range(1..=ih);
            let x = rng.random_range(0..=iw - w);
            let y = rng.random_range(0..=ih - h);
            let g = geometry_features(&BoundingBox::new(x, y, w, h), iw, ih).unwrap();
            assert!(g.iter().all(|&v| v > 0.0 && v <= 1.0), "{g:?}");
        }
    }

    #[test]
    fn zero_objectness_model_scores_half() {
        let m = ObjectnessModel::zeros(3);
        assert_eq!(m.score(&[5.0, -2.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn objectness_separable_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for _ in 0..40 {
            pos.push(vec![rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0)]);
            neg.push(vec![rng.random_range(-2.0..-0.5), rng.random_range(-1.0..1.0)]);
        }
        let m = objectness_train(&pos, &neg, ObjectnessTraining::default()).unwrap();
        let correct = pos.iter().filter(|x| m.score(x).unwrap() > 0.5).count()
            + neg.iter().filter(|x| m.score(x).unwrap() < 0.5).count();
        assert_eq!(correct, 80);
        for x in pos.iter().chain(&neg) {
            let s = m.score(x).unwrap();
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn objectness_single_class_rejected() {
        assert!(objectness_train(&[vec![1.0]], &[], ObjectnessTraining::default()).is_err());
        assert!(objectness_train(&[vec![]], &[vec![]], ObjectnessTraining::default()).is_err());
    }

    #[test]
    fn overlap_is_intersection_over_positive() {
        let pos = BoundingBox::new(0, 0, 10, 10);
        let cand = BoundingBox::new(5, 0, 10, 10);
        assert_eq!(overlap_with_positive(&cand, &pos), 0.5);
    }

    #[test]
    fn single_full_image_candidate() {
        let sel = select_regions(&[cand(0, 0, 50, 40, 0.3)], 1, 50, 40, 0).unwrap();
        assert_eq!(sel.indices, vec![0]);
        assert_eq!(sel.coverage, 1.0);
    }

    #[test]
    fn unattainable_coverage_reports_achieved() {
        let err = select_regions(&[cand(0, 0, 10, 10, 0.9)], 1, 20, 10, 0).unwrap_err();
        match err {
            Error::Coverage { achieved, .. } => assert_eq!(achieved, 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn stratified_candidates(seed: u64) -> Vec<CandidateBox> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [(8, 8), (20, 16), (40, 30), (80, 60)];
        let mut out = Vec::new();
        for i in 0..100 {
            let (w, h) = sizes[i % 4];
            let x = rng.random_range(0..=100 - w);
            let y = rng.random_range(0..=80 - h);
            out.push(cand(x, y, w, h, rng.random_range(0.0..1.0)));
        }
        // Guarantee the union can reach full coverage.
        out.push(cand(0, 0, 50, 80, 0.01));
        out.push(cand(50, 0, 50, 80, 0.02));
        out
    }

    #[test]
    fn selection_meets_coverage_and_diversity() {
        let cands = stratified_candidates(4);
        let sel = select_regions(&cands, 12, 100, 80, 17).unwrap();
        assert_eq!(sel.indices.len(), 12);
        assert!(sel.coverage >= 0.95, "{}", sel.coverage);
        let boxes: Vec<_> = sel.indices.iter().map(|&i| cands[i].bbox).collect();
        assert_eq!(coverage(&boxes, 100, 80).unwrap(), sel.coverage);
        let strata = size_strata(&cands);
        let mut seen: Vec<usize> = sel.indices.iter().map(|&i| strata[i]).collect();
        seen.sort();
        seen.dedup();
        assert!(seen.len() >= 3, "{seen:?}");
        let mut uniq = sel.indices.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 12);
        assert_eq!(select_regions(&cands, 12, 100, 80, 17).unwrap(), sel);
    }
}
