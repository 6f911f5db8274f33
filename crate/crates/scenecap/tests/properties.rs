//! Randomized invariants of the decoder, its building blocks, the scene
//! pipeline, region selection, metrics and the harness.

use std::collections::BTreeSet;

use numcore::{finite_diff_check, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenecap::attention::{attend, attend_tracked, blend, blend_tracked, AttentionNet};
use scenecap::captioner::{
    beam_decode, CaptionModel, DecoderState, FactorizedLayers, ModelConfig, SceneFactorization,
};
use scenecap::harness::{retrieval_eval, synth_dataset, train_with, Prepared, SynthSpec, TrainConfig};
use scenecap::regions::{select_regions, BoundingBox, CandidateBox, Region, RegionSet};
use scenecap::scene::{lda_fit, lda_infer, scene_predict, LdaConfig, SceneMlp, SceneVector};
use scenecap::seqmodel::{factorized_matrix, lstm_step, Gate, LstmLayer};
use scenecap::textmetrics::{bleu, cider_d, rouge_l, END};

const VOCAB: usize = 10;

fn config(attention: bool, scene: bool, cell: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB,
        embed_dim: 5,
        hidden: 6,
        feature_dim: 4,
        attention_hidden: 5,
        attention,
        scene: scene.then_some(SceneFactorization {
            topics: 3,
            rank: 4,
            factorize_cell: cell,
            layers: FactorizedLayers::Both,
        }),
        attention_uses_bottom_hidden: false,
    }
}

fn regions(rng: &mut ChaCha8Rng, r: usize, d: usize) -> RegionSet {
    RegionSet::new(
        (0..r)
            .map(|_| Region {
                feature: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bbox: BoundingBox::new(rng.random_range(0..8), rng.random_range(0..8), 4, 4),
            })
            .collect(),
    )
    .unwrap()
}

fn scene(rng: &mut ChaCha8Rng, k: usize) -> SceneVector {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    SceneVector::new(raw.iter().map(|v| v / total).collect()).unwrap()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|&v| v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn step_distributions_and_loss_decomposition(
        seed in 0u64..10_000,
        r in 1usize..5,
        attention: bool,
        factorized: bool,
        cell: bool,
        caption in prop::collection::vec(3usize..VOCAB, 1..7),
    ) {
        let model = CaptionModel::new(config(attention, factorized, cell), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regs = regions(&mut rng, r, 4);
        let s = scene(&mut rng, 3);
        let s = factorized.then_some(&s);

        let pass = model.teacher_forced(&regs, s, &caption).unwrap();
        let mut state = model.initial_state(&regs, s).unwrap();
        let mut total = 0.0;
        for (t, &target) in caption.iter().chain([END].iter()).enumerate() {
            let out = model.step(&state, &regs, s).unwrap();
            prop_assert!(is_distribution(&out.probs));
            if let Some(w) = &out.attention {
                prop_assert!(is_distribution(w.as_slice()));
            }
            let step_loss = -out.log_probs[target];
            prop_assert_eq!(step_loss.to_bits(), pass.step_losses[t].to_bits());
            total += step_loss;
            state = DecoderState { prev_token: target, ..out.state };
        }
        prop_assert_eq!(total.to_bits(), pass.loss.to_bits());
        prop_assert_eq!(model.teacher_forced_loss(&regs, s, &caption).unwrap().to_bits(), pass.loss.to_bits());
        for w in &pass.attention {
            prop_assert!(is_distribution(w.as_slice()));
        }
    }

    #[test]
    fn beam_has_no_duplicates_and_is_deterministic(
        seed in 0u64..10_000,
        beam in 1usize..9,
        max_len in 1usize..7,
        attention: bool,
        factorized: bool,
    ) {
        let cfg = config(attention, factorized, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regs = regions(&mut rng, 3, 4);
        let s = scene(&mut rng, 3);
        let s = factorized.then_some(&s);
        let a = beam_decode(&CaptionModel::new(cfg.clone(), seed).unwrap(), &regs, s, beam, max_len).unwrap();
        let b = beam_decode(&CaptionModel::new(cfg, seed).unwrap(), &regs, s, beam, max_len).unwrap();
        let seqs: BTreeSet<&Vec<usize>> = a.iter().map(|h| &h.decoded.tokens).collect();
        prop_assert_eq!(seqs.len(), a.len());
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.decoded.tokens, &y.decoded.tokens);
            prop_assert_eq!(x.decoded.log_prob.to_bits(), y.decoded.log_prob.to_bits());
        }
    }

    #[test]
    fn lstm_cell_growth_is_bounded(
        seed in 0u64..10_000,
        hidden in 1usize..8,
        input in 1usize..8,
        scale in 0.1f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = LstmLayer::random(&mut rng, input, hidden, [false; 4], 1)
            .map(&mut |t| t.map(|v| v * scale));
        let mut c: Vec<f64> = (0..hidden).map(|_| rng.random_range(-3.0..3.0)).collect();
        for _ in 0..5 {
            let x: Vec<f64> = (0..input).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (h, next) = layer.step(&x, &c, None).unwrap();
            for u in 0..hidden {
                prop_assert!(next[u].abs() <= c[u].abs() + 1.0);
                prop_assert!(h[u].abs() < 1.0);
            }
            c = next;
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in 0u64..10_000, r in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = AttentionNet::random(&mut rng, 4, 3, 5, 6);
        let regs = regions(&mut rng, r, 4);
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut order: Vec<usize> = (0..r).collect();
        order.reverse();
        order.rotate_left(seed as usize % r);
        let permuted = regs.permuted(&order).unwrap();
        let p = attend(&net, &regs, &w, &h, &v).unwrap();
        let q = attend(&net, &permuted, &w, &h, &v).unwrap();
        for (k, &i) in order.iter().enumerate() {
            prop_assert!((q.as_slice()[k] - p.as_slice()[i]).abs() <= 1e-14);
        }
        let a = blend(&p, &regs).unwrap();
        let b = blend(&q, &permuted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-14);
        }
    }

    #[test]
    fn metrics_are_bounded(
        seed in 0u64..10_000,
        images in 2usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
            (0..rng.random_range(1..8)).map(|_| ["a", "b", "c", "d", "e"][rng.random_range(0..5)].to_string()).collect()
        };
        let cands: Vec<Vec<String>> = (0..images).map(|_| sentence(&mut rng)).collect();
        let refs: Vec<Vec<Vec<String>>> = (0..images)
            .map(|_| (0..rng.random_range(1..4)).map(|_| sentence(&mut rng)).collect())
            .collect();
        for n in 1..=4 {
            let b = bleu(&cands, &refs, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
        let rl = rouge_l(&cands, &refs, 1.2).unwrap();
        prop_assert!((0.0..=1.0).contains(&rl));
        let c = cider_d(&cands, &refs).unwrap();
        prop_assert!(c >= 0.0);
        let single: Vec<Vec<Vec<String>>> = refs.iter().map(|r| vec![r[0].clone()]).collect();
        let identity: Vec<Vec<String>> = single.iter().map(|r| r[0].clone()).collect();
        prop_assert!(cider_d(&identity, &single).unwrap() + 1e-12 >= cider_d(&cands, &single).unwrap());
    }

    #[test]
    fn region_selection_is_a_reproducible_subset(seed in 0u64..10_000, n in 1usize..20, r in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (32u32, 24u32);
        let mut candidates = vec![CandidateBox { bbox: BoundingBox::new(0, 0, w, h), feature: vec![0.0], score: Some(0.5) }];
        for _ in 1..n {
            let bw = rng.random_range(1..=w);
            let bh = rng.random_range(1..=h);
            candidates.push(CandidateBox {
                bbox: BoundingBox::new(rng.random_range(0..=w - bw), rng.random_range(0..=h - bh), bw, bh),
                feature: vec![rng.random_range(-1.0..1.0)],
                score: Some((rng.random_range(0..4) as f64) / 4.0),
            });
        }
        let a = select_regions(&candidates, r, w, h, seed).unwrap();
        let b = select_regions(&candidates, r, w, h, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.indices.len(), r.min(n));
        let unique: BTreeSet<usize> = a.indices.iter().copied().collect();
        prop_assert_eq!(unique.len(), a.indices.len());
        prop_assert!(a.indices.iter().all(|&i| i < n));
    }

    #[test]
    fn predicted_scenes_fit_factorized_gates(seed in 0u64..10_000, topics in 1usize..6, rank in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = SceneMlp::random(7, &[5], topics, seed);
        let g: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s = scene_predict(&mlp, &g).unwrap();
        prop_assert!(is_distribution(s.as_slice()));
        let m = factorized_matrix(
            &tensor(&mut rng, &[4, rank], 1.0),
            &tensor(&mut rng, &[rank, 3], 1.0),
            &tensor(&mut rng, &[rank, topics], 1.0),
            &s,
        )
        .unwrap();
        prop_assert_eq!(m.shape(), &[4, 3]);
    }
}

#[test]
fn chained_lstm_gradient_check() {
    let (input, hidden, rank, topics) = (3, 4, 3, 2);
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for _ in 0..4 {
            params.push(tensor(&mut rng, &[hidden, rank], 0.8));
            params.push(tensor(&mut rng, &[rank, input + hidden], 0.8));
            params.push(tensor(&mut rng, &[hidden], 0.5));
        }
        params.push(tensor(&mut rng, &[rank, topics], 1.0));
        let xs: Vec<Tensor> = (0..5).map(|_| tensor(&mut rng, &[input], 1.0)).collect();
        let s = scene(&mut rng, topics);
        let report = finite_diff_check(&params, 1e-5, |tape, v| {
            let gate = |j: usize| Gate::Factorized { a: v[3 * j], b: v[3 * j + 1], bias: v[3 * j + 2] };
            let layer: LstmLayer<Var> = LstmLayer { gates: [gate(0), gate(1), gate(2), gate(3)] };
            let st = tape.constant(s.to_tensor());
            let gain = tape.matmul(v[12], st)?;
            let mut h = tape.constant(Tensor::zeros(&[hidden]));
            let mut c = tape.constant(Tensor::zeros(&[hidden]));
            for x in &xs {
                let xv = tape.constant(x.clone());
                let inp = tape.concat(&[xv, h])?;
                (h, c) = lstm_step(tape, &layer, inp, c, Some(gain))
                    .map_err(|e| numcore::NumError::Invalid(e.to_string()))?;
            }
            let hc = tape.concat(&[h, c])?;
            Ok(tape.sum(hc))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "seed {seed}: {report:?}");
    }
}

#[test]
fn attend_blend_gradient_check() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = AttentionNet::random(&mut rng, 4, 3, 5, 6);
        let mut params: Vec<Tensor> = vec![
            net.region.clone(),
            net.word.clone(),
            net.hidden.clone(),
            net.context.clone(),
            net.bias.clone(),
            net.score.clone(),
        ];
        params.push(tensor(&mut rng, &[5, 4], 1.0));
        let w = tensor(&mut rng, &[3], 1.0);
        let h = tensor(&mut rng, &[5], 1.0);
        let prev = tensor(&mut rng, &[4], 1.0);
        let report = finite_diff_check(&params, 1e-4, |tape, v| {
            let bound = AttentionNet { region: v[0], word: v[1], hidden: v[2], context: v[3], bias: v[4], score: v[5] };
            let (wv, hv, pv) = (tape.constant(w.clone()), tape.constant(h.clone()), tape.constant(prev.clone()));
            let p = attend_tracked(tape, &bound, v[6], wv, hv, pv)
                .map_err(|e| numcore::NumError::Invalid(e.to_string()))?;
            let ctx = blend_tracked(tape, p, v[6]).map_err(|e| numcore::NumError::Invalid(e.to_string()))?;
            let squashed = tape.tanh(ctx);
            Ok(tape.sum(squashed))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "seed {seed}: {report:?}");
    }
}

#[test]
fn lda_inference_is_exchangeable() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let words = [["red", "green", "blue", "cyan"], ["cat", "dog", "cow", "pig"]];
    let corpus: Vec<Vec<String>> = (0..60)
        .map(|d| (0..30).map(|_| words[d % 2][rng.random_range(0..4)].to_string()).collect())
        .collect();
    let model = lda_fit(&corpus, &LdaConfig { alpha: Some(0.5), ..LdaConfig::new(2, 4) }).unwrap();
    for trial in 0..10 {
        let doc: Vec<String> = (0..12).map(|_| words[rng.random_range(0..2)][rng.random_range(0..4)].to_string()).collect();
        let mut reversed = doc.clone();
        reversed.reverse();
        let a = lda_infer(&model, &doc, 300, 50, trial).unwrap();
        let b = lda_infer(&model, &reversed, 300, 50, trial).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 0.05, "trial {trial}: {a:?} vs {b:?}");
        }
    }
}

fn tiny_run() -> (TrainConfig, scenecap::harness::SynthData) {
    let spec = SynthSpec { train: 24, val: 8, test: 0, seed: 5, ..SynthSpec::default() };
    let config = TrainConfig {
        hidden: 10,
        embed: 8,
        rank: 6,
        topics: 2,
        minibatch: 8,
        learning_rate: 1e-2,
        max_epochs: 8,
        patience: 0,
        seed: 2,
        ..TrainConfig::default()
    };
    (config, synth_dataset(&spec).unwrap())
}

#[test]
fn checkpoints_never_regress() {
    let (config, data) = tiny_run();
    let mut written = Vec::new();
    let ckpt = train_with(&config, &data.train, &data.val, None, |c| {
        written.push(c.best_bleu1().unwrap());
        Ok(())
    })
    .unwrap();
    assert!(!written.is_empty());
    assert!(written.windows(2).all(|w| w[1] >= w[0]), "{written:?}");
    assert_eq!(ckpt.best_bleu1(), written.last().copied());
}

#[test]
fn retrieval_scores_are_negated_losses() {
    let (config, data) = tiny_run();
    let ckpt = train_with(&TrainConfig { max_epochs: 1, ..config }, &data.train, &data.val, None, |_| Ok(())).unwrap();
    let model = ckpt.model().unwrap();
    let set = Prepared::new(&data.val, &ckpt.vocabulary, &model, None).unwrap();
    let report = retrieval_eval(&model, &set).unwrap();
    for i in 0..set.len() {
        for j in 0..set.len() {
            let loss = model
                .teacher_forced_loss(&set.regions[i], set.scenes[i].as_ref(), &set.captions[j][0])
                .unwrap();
            assert_eq!(report.scores[i][j].to_bits(), (-loss).to_bits());
        }
    }
}
