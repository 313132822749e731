//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {index}: moment shape {state:?} does not match param shape {param:?}")]
    ShapeMismatch {
        index: usize,
        state: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("expected {expected} gradients, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
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

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            second_moment: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
        }
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }
}

/// One Adam update over a parameter list. The step counter increments by
/// exactly 1; moments and parameters are updated in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
) -> Result<(), OptimError> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(OptimError::CountMismatch {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || !state.first_moment[i].same_shape(p) {
            return Err(OptimError::ShapeMismatch {
                index: i,
                state: g.shape().to_vec(),
                param: p.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let g = &grads[i];
        let mut m_data = m.data().to_vec();
        let mut v_data = v.data().to_vec();
        let mut p_data = params[i].data().to_vec();
        for j in 0..p_data.len() {
            let gj = g.data()[j];
            m_data[j] = c.beta1 * m_data[j] + (1.0 - c.beta1) * gj;
            v_data[j] = c.beta2 * v_data[j] + (1.0 - c.beta2) * gj * gj;
            let m_hat = m_data[j] / bc1;
            let v_hat = v_data[j] / bc2;
            p_data[j] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        *m = Tensor::from_parts(m.shape().to_vec(), m_data);
        *v = Tensor::from_parts(v.shape().to_vec(), v_data);
        params[i] = Tensor::from_parts(params[i].shape().to_vec(), p_data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap()];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut state = AdamState::new(&params, AdamConfig::default());
        // decay moments first so they are nonzero
        let g1 = vec![Tensor::vector(vec![0.5, 0.5, 0.5]).unwrap()];
        adam_step(&mut params, &g1, &mut state).unwrap();
        let before = params[0].clone();
        adam_step(&mut params, &grads, &mut state).unwrap();
        // with zero gradient the first moment decays but params move only by
        // the residual momentum; the spec case is zero state:
        let mut fresh_params = vec![Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap()];
        let mut fresh = AdamState::new(&fresh_params, AdamConfig::default());
        adam_step(&mut fresh_params, &grads, &mut fresh).unwrap();
        assert_eq!(fresh_params[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(fresh.step, 1);
        // moments decay toward zero under repeated zero gradients
        let m0 = state.first_moment[0].data()[0].abs();
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert!(state.first_moment[0].data()[0].abs() < m0);
        let _ = before;
    }

    #[test]
    fn first_step_is_bias_corrected_sign_step() {
        // scalar param 1.0, grad 1.0, lr 0.1 -> param ~ 0.9 on step 1
        let mut params = vec![Tensor::scalar(1.0).unwrap()];
        let grads = vec![Tensor::scalar(1.0).unwrap()];
        let mut config = AdamConfig::default();
        config.learning_rate = 0.1;
        let mut state = AdamState::new(&params, config);
        adam_step(&mut params, &grads, &mut state).unwrap();
        // hand evaluation: m_hat = 1, v_hat = 1, step = lr * 1/(1 + eps)
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-12);
        assert!((params[0].data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn constant_positive_gradient_decreases_param_monotonically() {
        let mut params = vec![Tensor::scalar(5.0).unwrap()];
        let grads = vec![Tensor::scalar(2.0).unwrap()];
        let mut state = AdamState::new(&params, AdamConfig::default());
        let mut last = params[0].data()[0];
        for _ in 0..10 {
            adam_step(&mut params, &grads, &mut state).unwrap();
            assert!(params[0].data()[0] < last);
            last = params[0].data()[0];
        }
        assert_eq!(state.step, 10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0]).unwrap()];
        let grads = vec![Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()];
        let mut state = AdamState::new(&params, AdamConfig::default());
        assert!(adam_step(&mut params, &grads, &mut state).is_err());
    }
}
