//! Scene vectors: LDA topic proportions inferred from captions, and an MLP
//! that predicts them from a global image feature.

mod lda;
mod mlp;

pub use lda::{lda_fit, lda_infer, LdaConfig, LdaModel, LdaSampler, LDA_FORMAT_VERSION};
pub use mlp::{scene_mlp_train, scene_predict, SceneMlp, SceneMlpTraining, TrainedSceneMlp};

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full-scale topic count.
pub const DEFAULT_TOPICS: usize = 80;

const SCENE_TOLERANCE: f64 = 1e-9;

/// Probability vector over `K` topics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SceneVector(Vec<f64>);

impl SceneVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidScene("empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidScene(format!("entry {v} is not a probability")));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SCENE_TOLERANCE {
            return Err(Error::InvalidScene(format!("entries sum to {total}")));
        }
        Ok(Self(values))
    }

    /// Skips validation; for deliberately off-simplex probes.
    pub fn unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn one_hot(topics: usize, index: usize) -> Result<Self> {
        if index >= topics {
            return Err(Error::InvalidScene(format!(
                "topic {index} out of range for {topics} topics"
            )));
        }
        let mut v = vec![0.0; topics];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn uniform(topics: usize) -> Self {
        Self(vec![1.0 / topics as f64; topics])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.clone())
    }

    pub fn argmax(&self) -> usize {
        crate::attention::argmax_lowest(&self.0)
    }
}

impl TryFrom<Vec<f64>> for SceneVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SceneVector> for Vec<f64> {
    fn from(s: SceneVector) -> Self {
        s.0
    }
}
