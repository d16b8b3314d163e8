//! Adaptive first-order update rule: moment accumulation with bias
//! correction, decoupled weight decay, and a global gradient-norm clip.

use crate::error::{Error, Result};

/// Optimiser state for one parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling applied before the moment update.
    pub clip_norm: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// One optimiser step in place. The gradient is clipped to `clip_norm` in
/// global L2 norm; weight decay is decoupled from the moments.
pub fn adaptive_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            expected: state.m.len(),
            got: grad.len(),
        });
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = if norm > state.clip_norm {
        state.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i] * scale;
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * params[i]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![0.4, -1.2];
        let mut state = AdamState::new(2);
        adaptive_step(&mut params, &[0.0, 0.0], &mut state, 0.1).unwrap();
        assert_eq!(params, vec![0.4, -1.2]);
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        let lr = 0.01;
        let mut prev = params[0];
        let mut update = 0.0;
        for _ in 0..2000 {
            adaptive_step(&mut params, &[0.3], &mut state, lr).unwrap();
            update = (params[0] - prev).abs();
            prev = params[0];
        }
        assert!((update - lr).abs() / lr < 0.05, "update = {update}");
    }

    #[test]
    fn gradient_norm_is_clipped_to_one() {
        // With beta1 = 0 the first moment is the clipped gradient itself.
        let mut params = vec![0.0, 0.0];
        let mut state = AdamState::new(2);
        state.beta1 = 0.0;
        let grad = vec![6.0, 8.0]; // norm 10
        adaptive_step(&mut params, &grad, &mut state, 1.0).unwrap();
        let applied_norm = (state.m.iter().map(|m| m * m).sum::<f64>()).sqrt();
        assert!((applied_norm - 1.0).abs() < 1e-12);
        // Direction preserved.
        assert!((state.m[0] / state.m[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_params_without_gradient() {
        let mut params = vec![1.0];
        let mut state = AdamState::new(1);
        state.weight_decay = 0.1;
        adaptive_step(&mut params, &[0.0], &mut state, 0.5).unwrap();
        assert!((params[0] - (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        assert!(adaptive_step(&mut params, &[0.0, 0.0], &mut state, 0.1).is_err());
    }
}
