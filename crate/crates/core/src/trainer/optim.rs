use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u32,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Decoupled decay `w ← w·(1 − lr·wd)`, then the bias-corrected Adam update.
pub fn adamw_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, c: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.learning_rate * c.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * decay - c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let c = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut w = vec![2.0, -4.0];
        let mut s = AdamState::zeros(2);
        adamw_step(&mut w, &[0.0, 0.0], &mut s, &c).unwrap();
        assert_eq!(w, vec![2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let c = AdamWConfig {
            learning_rate: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = vec![1.0, 1.0];
        let mut s = AdamState::zeros(2);
        adamw_step(&mut w, &[3.0, -0.5], &mut s, &c).unwrap();
        assert!((w[0] - (1.0 - 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-7);
        assert!((w[1] - 1.01).abs() < 1e-6);
        assert!(adamw_step(&mut w, &[1.0], &mut s, &c).is_err());
    }
}
