//! Minibatch ADAM training with BLEU-1 early stopping.

use numcore::{AdamConfig, AdamState, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, EpochRecord};
use super::config::TrainConfig;
use super::dataset::{validate_records, DatasetRecord};
use super::eval::{greedy_bleu1, mean_token_loss, Prepared};
use crate::captioner::CaptionModel;
use crate::error::{Error, Result};
use crate::scene::SceneMlp;
use crate::textmetrics::build_vocab;

/// Trains with no per-improvement hook.
pub fn train(config: &TrainConfig, train: &[DatasetRecord], val: &[DatasetRecord]) -> Result<Checkpoint> {
    train_with(config, train, val, None, |_| Ok(()))
}

/// Trains and returns the checkpoint with the best validation BLEU-1 (ties
/// go to the lower validation loss). `on_improve` sees every new best.
///
/// Each minibatch computes per-example gradients in parallel and sums them
/// in example order, so results do not depend on thread scheduling.
pub fn train_with(
    config: &TrainConfig,
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    scene_mlp: Option<SceneMlp>,
    mut on_improve: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let dim = validate_records(train, true)?;
    let val_dim = validate_records(val, true)?;
    if val_dim != dim {
        return Err(Error::Dimension {
            what: "validation region feature",
            expected: dim,
            actual: val_dim,
        });
    }
    let corpus: Vec<Vec<String>> = train.iter().flat_map(|r| r.tokenized_captions()).collect();
    let vocab = build_vocab(&corpus, config.min_freq)?;
    let mut model = CaptionModel::new(config.model_config(vocab.len(), dim), config.seed)?;
    let train_set = Prepared::new(train, &vocab, &model, scene_mlp.as_ref())?;
    let val_set = Prepared::new(val, &vocab, &model, scene_mlp.as_ref())?;
    let examples: Vec<(usize, usize)> = train_set
        .captions
        .iter()
        .enumerate()
        .flat_map(|(i, caps)| (0..caps.len()).map(move |j| (i, j)))
        .collect();

    let mut ckpt = Checkpoint::new(config.clone(), vocab, &model);
    ckpt.scene_mlp = scene_mlp;
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        model.params.named().into_iter().map(|(_, t)| t),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_da7a);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<(f64, f64)> = None;
    let mut stale = 0;
    let mut steps = 0u64;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        let mut step_limit_hit = false;
        for (b, batch) in order.chunks(config.minibatch).enumerate() {
            let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
                .par_iter()
                .map(|&k| {
                    let (i, j) = examples[k];
                    let (loss, grads) = model.loss_and_gradients(
                        &train_set.regions[i],
                        train_set.scenes[i].as_ref(),
                        &train_set.captions[i][j],
                    )?;
                    Ok((loss, grads.named().into_iter().map(|(_, t)| t.clone()).collect()))
                })
                .collect();
            let mut total: Option<Vec<Tensor>> = None;
            for (r, &k) in results.into_iter().zip(batch) {
                let (loss, grads) = r.map_err(|e| match e {
                    Error::NonFiniteLoss(_) => {
                        Error::NonFiniteLoss(format!("epoch {epoch}, minibatch {b}"))
                    }
                    other => other,
                })?;
                let (i, j) = examples[k];
                loss_sum += loss;
                tokens += train_set.captions[i][j].len() + 1;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = total
                .expect("non-empty minibatch")
                .iter()
                .map(|g| g.scale(scale))
                .collect();
            adam.step(&mut model.params.tensors_mut(), &grads)?;
            steps += 1;
            if config.max_steps > 0 && steps >= config.max_steps as u64 {
                step_limit_hit = true;
                break;
            }
        }

        let val_loss = mean_token_loss(&model, &val_set)?;
        let val_bleu1 = greedy_bleu1(&model, &val_set, &ckpt.vocabulary, config.max_len)?;
        let improved = match best {
            None => true,
            Some((b, l)) => val_bleu1 > b || (val_bleu1 == b && val_loss < l),
        };
        ckpt.history.push(EpochRecord {
            epoch,
            steps,
            train_loss: loss_sum / tokens as f64,
            val_loss,
            val_bleu1,
            improved,
        });
        if improved {
            best = Some((val_bleu1, val_loss));
            stale = 0;
            ckpt.set_model(&model);
            ckpt.step = steps;
            on_improve(&ckpt)?;
        } else {
            stale += 1;
        }
        if step_limit_hit || (config.patience > 0 && stale >= config.patience) {
            break;
        }
    }
    Ok(ckpt)
}
