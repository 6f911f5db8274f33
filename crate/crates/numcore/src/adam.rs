use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected ADAM update, in place.
    ///
    /// All shapes and gradient values are validated before any parameter is
    /// touched, so a failed step leaves parameters and moments unchanged.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(NumError::Invalid(format!(
                "adam expects {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            p.check_same(g, "adam_step")?;
            p.check_same(m, "adam_step")?;
            if !g.all_finite() {
                return Err(NumError::NonFinite("adam gradient"));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut theta = Tensor::scalar(0.0);
        let mut state = AdamState::new(AdamConfig::default(), [&theta]);
        state
            .step(&mut [&mut theta], &[Tensor::scalar(1.0)])
            .unwrap();
        assert!((theta.item() + 0.001).abs() < 1e-9, "{}", theta.item());
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut theta = Tensor::vector(vec![0.3, -2.0, 7.5]);
        let before = theta.clone();
        let mut state = AdamState::new(AdamConfig::default(), [&theta]);
        for _ in 0..50 {
            state
                .step(&mut [&mut theta], &[Tensor::zeros(&[3])])
                .unwrap();
        }
        assert_eq!(theta, before);
        assert_eq!(state.steps(), 50);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut theta = Tensor::scalar(0.0);
        let config = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(config, [&theta]);
        for _ in 0..5000 {
            let g = Tensor::scalar(2.0 * (theta.item() - 5.0));
            state.step(&mut [&mut theta], &[g]).unwrap();
        }
        assert!((theta.item() - 5.0).abs() < 1e-3, "{}", theta.item());
    }

    #[test]
    fn shape_mismatch_and_non_finite_rejected() {
        let mut theta = Tensor::vector(vec![1.0, 2.0]);
        let mut state = AdamState::new(AdamConfig::default(), [&theta]);
        assert!(state
            .step(&mut [&mut theta], &[Tensor::zeros(&[3])])
            .is_err());
        assert!(state
            .step(&mut [&mut theta], &[Tensor::vector(vec![f64::NAN, 0.0])])
            .is_err());
        assert_eq!(state.steps(), 0);
        assert_eq!(theta.data(), &[1.0, 2.0]);
    }
}
