//! The caption decoder: region attention, two stacked (optionally
//! scene-factorized) LSTMs and a word predictor, wired per time step.
//!
//! Time runs from `t = 0` (`#BEGIN#`) to `T + 1` (`#END#`). Step `t`
//! consumes `(w_{t-1}, h_{t-1}, v_{t-1})`, attends to produce `v_t`,
//! updates both LSTM layers and predicts `w_t`.

mod analysis;
mod decode;

pub use analysis::{attention_heatmap, distort_scene_decode, patch_word_match, HeatmapGrid, PatchMatch};
pub use decode::{beam_decode, greedy_decode, Decoded, Hypothesis, DEFAULT_MAX_LEN};

use numcore::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_tracked, blend_tracked, AttentionNet, AttentionWeights};
use crate::error::{Error, Result};
use crate::init::uniform;
use crate::regions::RegionSet;
use crate::scene::SceneVector;
use crate::seqmodel::{lstm_step, InitMlpSet, LstmLayer, LstmState};
use crate::textmetrics::{BEGIN, END};

/// Which LSTM layers carry factorized gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorizedLayers {
    Both,
    Bottom,
    Top,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFactorization {
    pub topics: usize,
    pub rank: usize,
    /// Also factorize the candidate-cell block `g` (off by default).
    pub factorize_cell: bool,
    pub layers: FactorizedLayers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Region feature width, geometry included.
    pub feature_dim: usize,
    pub attention_hidden: usize,
    /// Region attention; without it the context stays at the mean region feature.
    pub attention: bool,
    pub scene: Option<SceneFactorization>,
    /// Feed `h¹ ‖ h²` to the attention network instead of `h²` alone.
    pub attention_uses_bottom_hidden: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("attention_hidden", self.attention_hidden),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size <= END {
            return Err(Error::Config("vocabulary must hold the reserved tokens".into()));
        }
        if let Some(sf) = &self.scene {
            if sf.topics < 1 || sf.rank < 1 {
                return Err(Error::Config("scene topics and rank must be positive".into()));
            }
        }
        Ok(())
    }

    fn attention_state_dim(&self) -> usize {
        if self.attention_uses_bottom_hidden {
            2 * self.hidden
        } else {
            self.hidden
        }
    }

    fn factorize_mask(&self, bottom: bool) -> [bool; 4] {
        match &self.scene {
            None => [false; 4],
            Some(sf) => {
                let on = match sf.layers {
                    FactorizedLayers::Both => true,
                    FactorizedLayers::Bottom => bottom,
                    FactorizedLayers::Top => !bottom,
                };
                [on, on, on, on && sf.factorize_cell]
            }
        }
    }
}

/// One-hidden-layer tanh network over `(P_w w_{t-1}, h_t, v_t)` with a
/// softmax readout over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordPredictor<T> {
    pub word: T,
    pub hidden: T,
    pub context: T,
    pub bias: T,
    pub out: T,
    pub out_bias: T,
}

impl<T> WordPredictor<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> WordPredictor<U> {
        WordPredictor {
            word: f(&self.word),
            hidden: f(&self.hidden),
            context: f(&self.context),
            bias: f(&self.bias),
            out: f(&self.out),
            out_bias: f(&self.out_bias),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.word"), &self.word));
        out.push((format!("{prefix}.hidden"), &self.hidden));
        out.push((format!("{prefix}.context"), &self.context));
        out.push((format!("{prefix}.bias"), &self.bias));
        out.push((format!("{prefix}.out"), &self.out));
        out.push((format!("{prefix}.out_bias"), &self.out_bias));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.word);
        out.push(&mut self.hidden);
        out.push(&mut self.context);
        out.push(&mut self.bias);
        out.push(&mut self.out);
        out.push(&mut self.out_bias);
    }
}

impl WordPredictor<Var> {
    fn logits(&self, tape: &mut Tape<'_>, word: Var, h: Var, v: Var) -> Result<Var> {
        let a = tape.matmul(self.word, word)?;
        let b = tape.matmul(self.hidden, h)?;
        let c = tape.matmul(self.context, v)?;
        let z = tape.add(a, b)?;
        let z = tape.add(z, c)?;
        let z = tape.add(z, self.bias)?;
        let z = tape.tanh(z);
        let y = tape.matmul(self.out, z)?;
        Ok(tape.add(y, self.out_bias)?)
    }
}

/// Every learnable tensor of the decoder, generic over storage so the same
/// layout serves for weights (`Tensor`), tape handles (`Var`) and gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionParams<T> {
    pub embedding: T,
    pub attention: Option<AttentionNet<T>>,
    pub bottom: LstmLayer<T>,
    pub top: LstmLayer<T>,
    pub scene_factors: Option<T>,
    pub predictor: WordPredictor<T>,
    pub init: InitMlpSet<T>,
}

impl<T> CaptionParams<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> CaptionParams<U> {
        CaptionParams {
            embedding: f(&self.embedding),
            attention: self.attention.as_ref().map(|a| a.map(f)),
            bottom: self.bottom.map(f),
            top: self.top.map(f),
            scene_factors: self.scene_factors.as_ref().map(&mut *f),
            predictor: self.predictor.map(f),
            init: self.init.map(f),
        }
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        if let Some(a) = &self.attention {
            a.collect("attention", &mut out);
        }
        self.bottom.collect("lstm.bottom", &mut out);
        self.top.collect("lstm.top", &mut out);
        if let Some(f) = &self.scene_factors {
            out.push(("scene_factors".to_string(), f));
        }
        self.predictor.collect("predictor", &mut out);
        self.init.collect("init", &mut out);
        out
    }

    /// Mutable references in the same order as [`CaptionParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embedding];
        if let Some(a) = &mut self.attention {
            a.collect_mut(&mut out);
        }
        self.bottom.collect_mut(&mut out);
        self.top.collect_mut(&mut out);
        if let Some(f) = &mut self.scene_factors {
            out.push(f);
        }
        self.predictor.collect_mut(&mut out);
        self.init.collect_mut(&mut out);
        out
    }

    /// Rebuilds a parameter tree of this layout from values in canonical order.
    pub fn with_values<U: Clone>(&self, values: &[U]) -> Result<CaptionParams<U>> {
        let expected = self.named().len();
        if values.len() != expected {
            return Err(Error::Dimension {
                what: "parameter list",
                expected,
                actual: values.len(),
            });
        }
        let mut it = values.iter();
        Ok(self.map(&mut |_| it.next().expect("length checked").clone()))
    }
}

impl CaptionParams<Tensor> {
    pub fn zeroed(&self) -> Self {
        self.map(&mut |t| Tensor::zeros(t.shape()))
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Decoder state carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub lstm: LstmState,
    /// Current visual context `v_t`.
    pub context: Vec<f64>,
    pub prev_token: usize,
    pub t: usize,
}

/// Everything produced by one decoding step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// `None` when the model has no region attention.
    pub attention: Option<AttentionWeights>,
}

/// Per-step results of a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// Total negative log-likelihood in nats, `#END#` included.
    pub loss: f64,
    /// `-log p(w_t)` for `t = 1..=T+1`.
    pub step_losses: Vec<f64>,
    /// Most probable token at each step (never `#BEGIN#`; ties to the lowest id).
    pub predictions: Vec<usize>,
    pub attention: Vec<AttentionWeights>,
}

#[derive(Clone, Copy)]
struct TrackedState {
    h1: Var,
    c1: Var,
    h2: Var,
    c2: Var,
    v: Var,
    prev_token: usize,
}

struct Bound {
    params: CaptionParams<Var>,
    regions: Var,
    gain: Option<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub params: CaptionParams<Tensor>,
}

impl CaptionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, m, h, d) = (
            config.vocab_size,
            config.embed_dim,
            config.hidden,
            config.feature_dim,
        );
        let rank = config.scene.as_ref().map_or(1, |s| s.rank);
        let embedding = uniform(&mut rng, &[w, m], 1.0 / (m as f64).sqrt());
        let attention = config.attention.then(|| {
            AttentionNet::random(
                &mut rng,
                d,
                m,
                config.attention_state_dim(),
                config.attention_hidden,
            )
        });
        let bottom = LstmLayer::random(&mut rng, m + 2 * h + d, h, config.factorize_mask(true), rank);
        let top = LstmLayer::random(&mut rng, 2 * h, h, config.factorize_mask(false), rank);
        let scene_factors = config.scene.as_ref().map(|sf| {
            let data = (0..sf.rank * sf.topics)
                .map(|_| 1.0 + rng.random_range(-0.3..0.3))
                .collect();
            Tensor::matrix(sf.rank, sf.topics, data).expect("positive sizes")
        });
        let s = 1.0 / ((m + h + d) as f64).sqrt();
        let predictor = WordPredictor {
            word: uniform(&mut rng, &[m, m], s),
            hidden: uniform(&mut rng, &[m, h], s),
            context: uniform(&mut rng, &[m, d], s),
            bias: Tensor::zeros(&[m]),
            out: uniform(&mut rng, &[w, m], 1.0 / (m as f64).sqrt()),
            out_bias: Tensor::zeros(&[w]),
        };
        let init = InitMlpSet::random(&mut rng, d, h);
        Ok(Self {
            config,
            params: CaptionParams {
                embedding,
                attention,
                bottom,
                top,
                scene_factors,
                predictor,
                init,
            },
        })
    }

    /// Same structure with every parameter set to zero.
    pub fn zeroed(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.zeroed(),
        }
    }

    pub fn is_factorized(&self) -> bool {
        self.config.scene.is_some()
    }

    pub fn has_attention(&self) -> bool {
        self.params.attention.is_some()
    }

    fn check_inputs(&self, regions: &RegionSet, scene: Option<&SceneVector>) -> Result<()> {
        if regions.feature_dim() != self.config.feature_dim {
            return Err(Error::Dimension {
                what: "region feature",
                expected: self.config.feature_dim,
                actual: regions.feature_dim(),
            });
        }
        if let (Some(sf), Some(s)) = (&self.config.scene, scene) {
            if s.len() != sf.topics {
                return Err(Error::Dimension {
                    what: "scene topics",
                    expected: sf.topics,
                    actual: s.len(),
                });
            }
        }
        if self.is_factorized() && scene.is_none() {
            return Err(Error::MissingScene);
        }
        Ok(())
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn bind<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        regions: &'p RegionSet,
        scene: Option<&SceneVector>,
    ) -> Result<Bound> {
        self.check_inputs(regions, scene)?;
        let params = self.params.map(&mut |t| tape.param(t));
        let regions = tape.param(regions.features());
        let gain = match (params.scene_factors, scene) {
            (Some(f), Some(s)) => {
                let s = tape.constant(s.to_tensor());
                Some(tape.matmul(f, s)?)
            }
            _ => None,
        };
        Ok(Bound {
            params,
            regions,
            gain,
        })
    }

    fn initial_tracked(&self, tape: &mut Tape<'_>, bound: &Bound) -> Result<TrackedState> {
        let r = tape.value(bound.regions).rows();
        let weights = tape.constant(Tensor::vector(vec![1.0 / r as f64; r]));
        let v0 = tape.matmul(weights, bound.regions)?;
        let [c1, h1, c2, h2] = bound.params.init.forward(tape, v0)?;
        Ok(TrackedState {
            h1,
            c1,
            h2,
            c2,
            v: v0,
            prev_token: BEGIN,
        })
    }

    fn step_tracked(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        st: &TrackedState,
    ) -> Result<(TrackedState, Var, Option<Var>)> {
        let p = &bound.params;
        let word = tape.row(p.embedding, st.prev_token)?;
        let (v, attention) = match &p.attention {
            Some(net) => {
                let state = if self.config.attention_uses_bottom_hidden {
                    tape.concat(&[st.h1, st.h2])?
                } else {
                    st.h2
                };
                let weights = attend_tracked(tape, net, bound.regions, word, state, st.v)?;
                (blend_tracked(tape, weights, bound.regions)?, Some(weights))
            }
            None => (st.v, None),
        };
        let bottom_in = tape.concat(&[word, st.h1, st.h2, v])?;
        let bottom_gain = bound.gain.filter(|_| p.bottom.is_factorized());
        let (h1, c1) = lstm_step(tape, &p.bottom, bottom_in, st.c1, bottom_gain)?;
        let top_in = tape.concat(&[h1, st.h2])?;
        let top_gain = bound.gain.filter(|_| p.top.is_factorized());
        let (h2, c2) = lstm_step(tape, &p.top, top_in, st.c2, top_gain)?;
        let logits = p.predictor.logits(tape, word, h2, v)?;
        Ok((
            TrackedState {
                h1,
                c1,
                h2,
                c2,
                v,
                prev_token: st.prev_token,
            },
            logits,
            attention,
        ))
    }

    /// `v₀` (mean region feature) and the MLP-initialized LSTM state.
    pub fn initial_state(&self, regions: &RegionSet, scene: Option<&SceneVector>) -> Result<DecoderState> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, regions, scene)?;
        let st = self.initial_tracked(&mut tape, &bound)?;
        Ok(extract_state(&tape, &st, 0))
    }

    /// One decoding step from `state`.
    pub fn step(
        &self,
        state: &DecoderState,
        regions: &RegionSet,
        scene: Option<&SceneVector>,
    ) -> Result<StepOutput> {
        self.check_token(state.prev_token)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, regions, scene)?;
        let vec = |tape: &mut Tape<'_>, v: &[f64]| tape.constant(Tensor::vector(v.to_vec()));
        let st = TrackedState {
            h1: vec(&mut tape, &state.lstm.h1),
            c1: vec(&mut tape, &state.lstm.c1),
            h2: vec(&mut tape, &state.lstm.h2),
            c2: vec(&mut tape, &state.lstm.c2),
            v: vec(&mut tape, &state.context),
            prev_token: state.prev_token,
        };
        let (next, logits, attention) = self.step_tracked(&mut tape, &bound, &st)?;
        let log_probs = tape.log_softmax(logits)?;
        let probs = tape.softmax(logits)?;
        Ok(StepOutput {
            state: extract_state(&tape, &next, state.t + 1),
            probs: tape.value(probs).data().to_vec(),
            log_probs: tape.value(log_probs).data().to_vec(),
            attention: attention.map(|a| AttentionWeights::new(tape.value(a).data().to_vec())),
        })
    }

    fn loss_tracked(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        caption: &[usize],
        mut on_step: impl FnMut(&Tape<'_>, Var, Var, Option<Var>),
    ) -> Result<Var> {
        if caption.is_empty() {
            return Err(Error::Empty("caption"));
        }
        for &tok in caption {
            self.check_token(tok)?;
        }
        let mut st = self.initial_tracked(tape, bound)?;
        let mut total: Option<Var> = None;
        for &target in caption.iter().chain(std::iter::once(&END)) {
            let (next, logits, attention) = self.step_tracked(tape, bound, &st)?;
            let ce = tape.cross_entropy(logits, target)?;
            on_step(tape, logits, ce, attention);
            total = Some(match total {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
            st = TrackedState {
                prev_token: target,
                ..next
            };
        }
        Ok(total.expect("at least one step"))
    }

    /// Negative log-likelihood of `caption` (content tokens, no `#BEGIN#`),
    /// including the `#END#` prediction.
    pub fn teacher_forced_loss(
        &self,
        regions: &RegionSet,
        scene: Option<&SceneVector>,
        caption: &[usize],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, regions, scene)?;
        let loss = self.loss_tracked(&mut tape, &bound, caption, |_, _, _, _| {})?;
        Ok(tape.value(loss).item())
    }

    /// Teacher-forced pass that also reports per-step losses and attention.
    pub fn teacher_forced(
        &self,
        regions: &RegionSet,
        scene: Option<&SceneVector>,
        caption: &[usize],
    ) -> Result<TeacherForced> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, regions, scene)?;
        let mut step_losses = Vec::new();
        let mut predictions = Vec::new();
        let mut attention = Vec::new();
        let loss = self.loss_tracked(&mut tape, &bound, caption, |tape, logits, ce, att| {
            step_losses.push(tape.value(ce).item());
            predictions.push(decode::best_token(tape.value(logits).data()));
            if let Some(a) = att {
                attention.push(AttentionWeights::new(tape.value(a).data().to_vec()));
            }
        })?;
        Ok(TeacherForced {
            loss: tape.value(loss).item(),
            step_losses,
            predictions,
            attention,
        })
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        regions: &RegionSet,
        scene: Option<&SceneVector>,
        caption: &[usize],
    ) -> Result<(f64, CaptionParams<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, regions, scene)?;
        let loss = self.loss_tracked(&mut tape, &bound, caption, |_, _, _, _| {})?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss("teacher-forced caption".into()));
        }
        let mut adj = tape.backward(loss)?;
        let grads = bound.params.map(&mut |&v| adj.take(v));
        Ok((value, grads))
    }

    /// Loss as a function of an explicit parameter list in canonical order;
    /// used for finite-difference checks.
    pub fn loss_with_params(
        &self,
        values: &[Tensor],
        regions: &RegionSet,
        scene: Option<&SceneVector>,
        caption: &[usize],
    ) -> Result<f64> {
        let model = CaptionModel {
            config: self.config.clone(),
            params: self.params.with_values(values)?,
        };
        model.teacher_forced_loss(regions, scene, caption)
    }
}

fn extract_state(tape: &Tape<'_>, st: &TrackedState, t: usize) -> DecoderState {
    let get = |v: Var| tape.value(v).data().to_vec();
    DecoderState {
        lstm: LstmState {
            h1: get(st.h1),
            c1: get(st.c1),
            h2: get(st.h2),
            c2: get(st.c2),
        },
        context: get(st.v),
        prev_token: st.prev_token,
        t,
    }
}
