//! SGD and Adam parameter updates.

use super::tensor::Tensor;
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer with per-parameter state. Adam moments are allocated lazily on
/// the first step so the state always matches the parameter list it serves.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f32,
    beta1: f32,
    beta2: f32,
    epsilon: f32,
    step: u64,
    first_moments: Vec<Vec<f32>>,
    second_moments: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f32) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            step: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    pub fn adam(learning_rate: f32) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Apply one update. `params` and `grads` are aligned one-to-one; a grad may
/// be `None` when its parameter did not participate this step.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut [Tensor],
    grads: &[Option<&[f32]>],
) -> Result<(), NumericsError> {
    if params.len() != grads.len() {
        return Err(NumericsError::ParamGradMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.len() != p.numel() {
                return Err(NumericsError::ParamGradMismatch {
                    params: p.numel(),
                    grads: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFiniteGradient { index });
            }
        }
    }
    state.step += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                let Some(g) = g else { continue };
                for (pv, gv) in p.data_mut().iter_mut().zip(*g) {
                    *pv -= state.learning_rate * gv;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.first_moments.is_empty() {
                state.first_moments = params.iter().map(|p| vec![0.0; p.numel()]).collect();
                state.second_moments = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            }
            let bias1 = 1.0 - state.beta1.powi(state.step as i32);
            let bias2 = 1.0 - state.beta2.powi(state.step as i32);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let Some(g) = g else { continue };
                let m = &mut state.first_moments[i];
                let v = &mut state.second_moments[i];
                for ((pv, gv), (mv, vv)) in p
                    .data_mut()
                    .iter_mut()
                    .zip(*g)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
                    *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
                    let m_hat = *mv / bias1;
                    let v_hat = *vv / bias2;
                    *pv -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_is_exact() {
        let mut state = OptimizerState::sgd(0.1);
        let mut params = vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()];
        let g = [1.0f32];
        optimizer_step(&mut state, &mut params, &[Some(&g)]).unwrap();
        assert_eq!(params[0].data(), &[0.9]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn sgd_zero_lr_leaves_params() {
        let mut state = OptimizerState::sgd(0.0);
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap()];
        let g = [5.0f32, -3.0];
        optimizer_step(&mut state, &mut params, &[Some(&g)]).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_matches_hand_calculation() {
        // m=0.1, v=0.001, m_hat=1, v_hat=1 -> p = -lr / (1 + eps).
        let mut state = OptimizerState::adam(0.001);
        let mut params = vec![Tensor::from_vec(&[1], vec![0.0]).unwrap()];
        let g = [1.0f32];
        optimizer_step(&mut state, &mut params, &[Some(&g)]).unwrap();
        let expected = -0.001f32 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut state = OptimizerState::sgd(0.1);
        let mut params = vec![
            Tensor::from_vec(&[1], vec![0.0]).unwrap(),
            Tensor::from_vec(&[1], vec![0.0]).unwrap(),
        ];
        let good = [1.0f32];
        let bad = [f32::NAN];
        let err = optimizer_step(&mut state, &mut params, &[Some(&good), Some(&bad)]).unwrap_err();
        assert!(matches!(err, NumericsError::NonFiniteGradient { index: 1 }));
    }
}
