//! Versioned, canonically serialized training checkpoints.

use std::path::Path;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::captioner::{CaptionModel, ModelConfig};
use crate::error::{Error, Result};
use crate::scene::SceneMlp;
use crate::textmetrics::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Per-epoch training record. Losses are nats per predicted token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_bleu1: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub model_config: ModelConfig,
    pub parameters: Vec<NamedTensor>,
    #[serde(default)]
    pub scene_mlp: Option<SceneMlp>,
    /// Path of the LDA model the scene vectors came from, if any.
    #[serde(default)]
    pub lda_model: Option<String>,
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, vocabulary: Vocabulary, model: &CaptionModel) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config,
            vocabulary,
            model_config: model.config.clone(),
            parameters: model
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    tensor: t.clone(),
                })
                .collect(),
            scene_mlp: None,
            lda_model: None,
            step: 0,
            history: Vec::new(),
        }
    }

    /// Rebuilds the decoder, checking names and shapes against the layout
    /// implied by `model_config`.
    pub fn model(&self) -> Result<CaptionModel> {
        let layout = CaptionModel::new(self.model_config.clone(), 0)?;
        let names = layout.params.named();
        if names.len() != self.parameters.len() {
            return Err(Error::Dimension {
                what: "checkpoint parameter count",
                expected: names.len(),
                actual: self.parameters.len(),
            });
        }
        for ((name, t), p) in names.iter().zip(&self.parameters) {
            if *name != p.name || t.shape() != p.tensor.shape() {
                return Err(Error::Parse(format!(
                    "checkpoint parameter {} does not match expected {name}",
                    p.name
                )));
            }
        }
        let values: Vec<Tensor> = self.parameters.iter().map(|p| p.tensor.clone()).collect();
        Ok(CaptionModel {
            config: self.model_config.clone(),
            params: layout.params.with_values(&values)?,
        })
    }

    pub fn set_model(&mut self, model: &CaptionModel) {
        for (p, (_, t)) in self.parameters.iter_mut().zip(model.params.named()) {
            p.tensor = t.clone();
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Parse("checkpoint has no version".into()))?;
        if found != CHECKPOINT_VERSION as u64 {
            return Err(Error::Version {
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Self = serde_json::from_value(value)?;
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Best validation BLEU-1 recorded so far.
    pub fn best_bleu1(&self) -> Option<f64> {
        self.history
            .iter()
            .rev()
            .find(|r| r.improved)
            .map(|r| r.val_bleu1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmetrics::build_vocab;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            hidden: 4,
            embed: 3,
            rank: 2,
            topics: 2,
            ..TrainConfig::default()
        };
        let vocab = build_vocab(&[vec!["a".to_string(), "b".to_string()]], 1).unwrap();
        let model = CaptionModel::new(config.model_config(vocab.len(), 3), 9).unwrap();
        let mut c = Checkpoint::new(config, vocab, &model);
        c.history.push(EpochRecord {
            epoch: 1,
            steps: 3,
            train_loss: 0.1 + 0.2,
            val_loss: 1.0 / 3.0,
            val_bleu1: 0.5,
            improved: true,
        });
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let text = c.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.model().unwrap().params, c.model().unwrap().params);
    }

    #[test]
    fn version_is_checked() {
        let text = sample().to_json().unwrap().replacen("\"version\": 1", "\"version\": 7", 1);
        assert!(matches!(
            Checkpoint::from_json(&text),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn mismatched_parameters_rejected() {
        let mut c = sample();
        c.parameters.pop();
        assert!(Checkpoint::from_json(&c.to_json().unwrap()).is_err());
        let mut c = sample();
        c.parameters[0].name = "bogus".into();
        assert!(c.model().is_err());
    }
}
