//! Region scoring network and soft context blending.
//!
//! Each region `r_i` is scored by a one-hidden-layer network over
//! `(r_i, previous word embedding, previous hidden state, previous context)`;
//! the scores are softmax-normalized into attention weights `p_t`, and the
//! new context is `v_t = Σ p_it r_i`.

use numcore::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::uniform;
use crate::regions::RegionSet;

/// Weights of the region scoring network. `region` is stored as
/// `feature_dim × hidden` so that all regions are projected in one product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionNet<T> {
    pub region: T,
    pub word: T,
    pub hidden: T,
    pub context: T,
    pub bias: T,
    pub score: T,
}

impl<T> AttentionNet<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> AttentionNet<U> {
        AttentionNet {
            region: f(&self.region),
            word: f(&self.word),
            hidden: f(&self.hidden),
            context: f(&self.context),
            bias: f(&self.bias),
            score: f(&self.score),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.region"), &self.region));
        out.push((format!("{prefix}.word"), &self.word));
        out.push((format!("{prefix}.hidden"), &self.hidden));
        out.push((format!("{prefix}.context"), &self.context));
        out.push((format!("{prefix}.bias"), &self.bias));
        out.push((format!("{prefix}.score"), &self.score));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.region);
        out.push(&mut self.word);
        out.push(&mut self.hidden);
        out.push(&mut self.context);
        out.push(&mut self.bias);
        out.push(&mut self.score);
    }
}

impl AttentionNet<Tensor> {
    pub fn random(
        rng: &mut impl Rng,
        feature_dim: usize,
        embed_dim: usize,
        state_dim: usize,
        hidden: usize,
    ) -> Self {
        let fan_in = (2 * feature_dim + embed_dim + state_dim) as f64;
        let s = 1.0 / fan_in.sqrt();
        Self {
            region: uniform(rng, &[feature_dim, hidden], s),
            word: uniform(rng, &[hidden, embed_dim], s),
            hidden: uniform(rng, &[hidden, state_dim], s),
            context: uniform(rng, &[hidden, feature_dim], s),
            bias: Tensor::zeros(&[hidden]),
            score: uniform(rng, &[hidden], 1.0 / (hidden as f64).sqrt()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.region.rows()
    }
}

/// Attention distribution over the regions of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights(Vec<f64>);

impl AttentionWeights {
    pub fn new(weights: Vec<f64>) -> Self {
        Self(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest weight; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.0)
    }
}

pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Tracked attention weights `p_t`.
///
/// `regions` is the `R × D` feature matrix; `prev_h` is whatever hidden
/// state the network was built for (`h²`, or `h¹ ‖ h²`).
pub fn attend_tracked(
    tape: &mut Tape<'_>,
    net: &AttentionNet<Var>,
    regions: Var,
    prev_word: Var,
    prev_h: Var,
    prev_v: Var,
) -> Result<Var> {
    let projected = tape.matmul(regions, net.region)?;
    let w = tape.matmul(net.word, prev_word)?;
    let h = tape.matmul(net.hidden, prev_h)?;
    let v = tape.matmul(net.context, prev_v)?;
    let shared = tape.add(w, h)?;
    let shared = tape.add(shared, v)?;
    let shared = tape.add(shared, net.bias)?;
    let pre = tape.add_row(projected, shared)?;
    let act = tape.tanh(pre);
    let scores = tape.matmul(act, net.score)?;
    Ok(tape.softmax(scores)?)
}

/// Tracked context `v_t = Σ p_it r_i`.
pub fn blend_tracked(tape: &mut Tape<'_>, weights: Var, regions: Var) -> Result<Var> {
    Ok(tape.matmul(weights, regions)?)
}

/// Attention weights over `regions` for one decoding step.
pub fn attend(
    net: &AttentionNet<Tensor>,
    regions: &RegionSet,
    prev_word_embed: &[f64],
    prev_h: &[f64],
    prev_v: &[f64],
) -> Result<AttentionWeights> {
    if regions.feature_dim() != net.feature_dim() {
        return Err(Error::Dimension {
            what: "region feature",
            expected: net.feature_dim(),
            actual: regions.feature_dim(),
        });
    }
    for (what, expected, actual) in [
        ("word embedding", net.word.cols(), prev_word_embed.len()),
        ("attention hidden state", net.hidden.cols(), prev_h.len()),
        ("previous context", net.context.cols(), prev_v.len()),
    ] {
        if expected != actual {
            return Err(Error::Dimension {
                what,
                expected,
                actual,
            });
        }
    }
    let mut tape = Tape::new();
    let bound = net.map(&mut |t| tape.param(t));
    let r = tape.param(regions.features());
    let w = tape.constant(Tensor::vector(prev_word_embed.to_vec()));
    let h = tape.constant(Tensor::vector(prev_h.to_vec()));
    let v = tape.constant(Tensor::vector(prev_v.to_vec()));
    let p = attend_tracked(&mut tape, &bound, r, w, h, v)?;
    Ok(AttentionWeights(tape.value(p).data().to_vec()))
}

/// Convex combination of region features under `weights`.
pub fn blend(weights: &AttentionWeights, regions: &RegionSet) -> Result<Vec<f64>> {
    if weights.len() != regions.len() {
        return Err(Error::Dimension {
            what: "attention weights",
            expected: regions.len(),
            actual: weights.len(),
        });
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(weights.0.clone()));
    let r = tape.param(regions.features());
    let v = blend_tracked(&mut tape, p, r)?;
    Ok(tape.value(v).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::{BoundingBox, Region};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn region(feature: Vec<f64>) -> Region {
        Region {
            feature,
            bbox: BoundingBox::new(0, 0, 1, 1),
        }
    }

    fn random_regions(rng: &mut ChaCha8Rng, r: usize, d: usize) -> RegionSet {
        RegionSet::new(
            (0..r)
                .map(|_| region(uniform(rng, &[d], 1.0).into_data()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_region_gets_all_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = AttentionNet::random(&mut rng, 4, 3, 5, 6);
        let regions = random_regions(&mut rng, 1, 4);
        let p = attend(&net, &regions, &[0.1; 3], &[0.2; 5], &[0.3; 4]).unwrap();
        assert_eq!(p.as_slice(), &[1.0]);
    }

    #[test]
    fn identical_regions_get_uniform_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = AttentionNet::random(&mut rng, 3, 2, 2, 4);
        let regions = RegionSet::new(vec![region(vec![0.5, -0.2, 1.0]); 5]).unwrap();
        let p = attend(&net, &regions, &[0.4, 0.1], &[0.0, 1.0], &[0.1, 0.2, 0.3]).unwrap();
        for &w in p.as_slice() {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_form_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = AttentionNet::random(&mut rng, 6, 3, 4, 8);
        let regions = random_regions(&mut rng, 7, 6);
        let p = attend(&net, &regions, &[0.3; 3], &[-0.2; 4], &[0.05; 6]).unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.as_slice().iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn blend_definition_and_one_hot() {
        let regions = RegionSet::new(vec![region(vec![1.0, 2.0]), region(vec![3.0, -4.0])]).unwrap();
        let v = blend(&AttentionWeights::new(vec![0.25, 0.75]), &regions).unwrap();
        assert_eq!(v, vec![0.25 * 1.0 + 0.75 * 3.0, 0.25 * 2.0 + 0.75 * -4.0]);
        let v = blend(&AttentionWeights::new(vec![0.0, 1.0]), &regions).unwrap();
        assert_eq!(v, vec![3.0, -4.0]);
    }

    #[test]
    fn blend_length_mismatch() {
        let regions = RegionSet::new(vec![region(vec![1.0])]).unwrap();
        assert!(blend(&AttentionWeights::new(vec![0.5, 0.5]), &regions).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(AttentionWeights::new(vec![0.2, 0.4, 0.4]).argmax(), 1);
    }
}
