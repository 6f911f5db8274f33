//! Datasets, training, evaluation, retrieval, checkpoints and synthetic data.

mod checkpoint;
mod config;
mod dataset;
mod eval;
mod synth;
mod train;

pub use checkpoint::{Checkpoint, EpochRecord, NamedTensor, CHECKPOINT_VERSION};
pub use config::{Mode, TrainConfig, FULL_SCALE_PRESET};
pub use dataset::{read_records, validate_records, write_records, DatasetRecord, Splits};
pub use eval::{
    evaluate, generate, greedy_bleu1, greedy_captions, mean_token_loss, next_token_accuracy, resolve_scene,
    retrieval_eval, Evaluation, GeneratedCaption, MetricReport, Prepared, RankStats, RetrievalReport,
};
pub use synth::{scene_word, scene_words, synth_dataset, word_scene, SynthData, SynthSpec};
pub use train::{train, train_with};

use crate::captioner::CaptionModel;
use crate::error::Result;

/// Hidden size whose parameter count under `config` is closest to `budget`
/// (smaller size on ties). Used to compare modes at matched budgets.
pub fn hidden_for_budget(config: &TrainConfig, vocab_size: usize, feature_dim: usize, budget: usize) -> Result<usize> {
    let mut best = (usize::MAX, 1);
    for hidden in 1..=512 {
        let cfg = TrainConfig {
            hidden,
            ..config.clone()
        };
        let count = CaptionModel::new(cfg.model_config(vocab_size, feature_dim), 0)?
            .params
            .parameter_count();
        let gap = count.abs_diff(budget);
        if gap < best.0 {
            best = (gap, hidden);
        }
        if count > budget {
            break;
        }
    }
    Ok(best.1)
}
