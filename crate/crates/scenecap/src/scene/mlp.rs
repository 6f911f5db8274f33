//! Scene-predicting MLP: sigmoid hidden layers, softmax output over topics.

use numcore::{AdamConfig, AdamState, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SceneVector;
use crate::error::{Error, Result};
use crate::init::uniform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMlp {
    pub layers: Vec<DenseLayer>,
}

impl SceneMlp {
    /// Layer sizes `input → hidden… → topics`.
    pub fn random(input: usize, hidden: &[usize], topics: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(topics);
        let layers = sizes
            .windows(2)
            .map(|w| DenseLayer {
                weight: uniform(&mut rng, &[w[1], w[0]], (6.0 / (w[0] + w[1]) as f64).sqrt()),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Self { layers }
    }

    pub fn zeroed(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn topics(&self) -> usize {
        self.layers.last().map(|l| l.bias.len()).unwrap_or(0)
    }

    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn logits(&self, tape: &mut Tape<'_>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in vars.chunks(2).enumerate() {
            let z = tape.matmul(pair[0], h)?;
            let z = tape.add(z, pair[1])?;
            h = if i == last { z } else { tape.sigmoid(z) };
        }
        Ok(h)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "global feature",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }
}

/// Predicted scene vector for one global image feature.
pub fn scene_predict(mlp: &SceneMlp, global_feature: &[f64]) -> Result<SceneVector> {
    mlp.check_input(global_feature)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = mlp.tensors().into_iter().map(|t| tape.param(t)).collect();
    let x = tape.constant(Tensor::vector(global_feature.to_vec()));
    let logits = mlp.logits(&mut tape, &vars, x)?;
    let p = tape.softmax(logits)?;
    Ok(SceneVector::unchecked(tape.value(p).data().to_vec()))
}

#[derive(Clone, Debug)]
pub struct SceneMlpTraining {
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SceneMlpTraining {
    fn default() -> Self {
        Self {
            hidden: vec![1024, 512],
            adam: AdamConfig::default(),
            epochs: 100,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedSceneMlp {
    pub mlp: SceneMlp,
    /// Mean cross-entropy over the training set after each epoch; entry 0
    /// is the loss before any update.
    pub loss_trace: Vec<f64>,
}

fn soft_cross_entropy(mlp: &SceneMlp, x: &[f64], target: &SceneVector) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = mlp.tensors().into_iter().map(|t| tape.param(t)).collect();
    let xv = tape.constant(Tensor::vector(x.to_vec()));
    let logits = mlp.logits(&mut tape, &vars, xv)?;
    let logp = tape.log_softmax(logits)?;
    let t = tape.constant(target.to_tensor());
    let ll = tape.matmul(t, logp)?;
    let loss = tape.scale(ll, -1.0);
    let mut adj = tape.backward(loss)?;
    Ok((tape.value(loss).item(), vars.iter().map(|&v| adj.take(v)).collect()))
}

fn mean_loss(mlp: &SceneMlp, features: &[Vec<f64>], targets: &[SceneVector]) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in features.iter().zip(targets) {
        total += soft_cross_entropy(mlp, x, t)?.0;
    }
    Ok(total / features.len() as f64)
}

/// Trains the scene MLP by minibatch ADAM on cross-entropy against soft
/// topic targets.
pub fn scene_mlp_train(
    features: &[Vec<f64>],
    targets: &[SceneVector],
    training: &SceneMlpTraining,
) -> Result<TrainedSceneMlp> {
    if features.len() != targets.len() {
        return Err(Error::Dimension {
            what: "scene targets",
            expected: features.len(),
            actual: targets.len(),
        });
    }
    if features.is_empty() {
        return Err(Error::Empty("scene training set"));
    }
    let dim = features[0].len();
    let topics = targets[0].len();
    for x in features {
        if x.len() != dim {
            return Err(Error::Dimension {
                what: "global feature",
                expected: dim,
                actual: x.len(),
            });
        }
    }
    for t in targets {
        if t.len() != topics {
            return Err(Error::Dimension {
                what: "scene target",
                expected: topics,
                actual: t.len(),
            });
        }
        SceneVector::new(t.as_slice().to_vec())?;
    }

    let mut mlp = SceneMlp::random(dim, &training.hidden, topics, training.seed);
    let mut adam = AdamState::new(training.adam, mlp.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut loss_trace = vec![mean_loss(&mlp, features, targets)?];
    let batch = training.batch_size.max(1);
    for _ in 0..training.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grads: Option<Vec<Tensor>> = None;
            for &i in chunk {
                let (_, g) = soft_cross_entropy(&mlp, &features[i], &targets[i])?;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let grads: Vec<Tensor> = grads
                .expect("non-empty chunk")
                .iter()
                .map(|g| g.scale(scale))
                .collect();
            adam.step(&mut mlp.tensors_mut(), &grads)?;
        }
        loss_trace.push(mean_loss(&mlp, features, targets)?);
    }
    Ok(TrainedSceneMlp { mlp, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mlp_predicts_uniform() {
        let mlp = SceneMlp::random(5, &[4, 3], 6, 0).zeroed();
        let s = scene_predict(&mlp, &[1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        for &v in s.as_slice() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn untrained_predictions_are_distributions() {
        let mlp = SceneMlp::random(3, &[8, 4], 5, 7);
        for x in [[0.0, 0.0, 0.0], [10.0, -3.0, 2.0], [-50.0, 40.0, 0.1]] {
            let s = scene_predict(&mlp, &x).unwrap();
            assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mlp = SceneMlp::random(3, &[4], 2, 0);
        assert!(scene_predict(&mlp, &[1.0]).is_err());
        let t = vec![SceneVector::uniform(2)];
        assert!(scene_mlp_train(&[vec![1.0, 2.0]], &[], &SceneMlpTraining::default()).is_err());
        let cfg = SceneMlpTraining {
            hidden: vec![4],
            epochs: 0,
            ..SceneMlpTraining::default()
        };
        let trained = scene_mlp_train(&[vec![1.0, 2.0]], &t, &cfg).unwrap();
        let s = scene_predict(&trained.mlp, &[1.0, 2.0]).unwrap();
        assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
