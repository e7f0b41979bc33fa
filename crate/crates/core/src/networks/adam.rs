use serde::{Deserialize, Serialize};

/// Adam hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one entry per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    learning_rate: f64,
    cfg: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len(), "gradient length mismatch");
    assert_eq!(
        params.len(),
        state.first_moment.len(),
        "optimizer state length mismatch"
    );
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 1e-3, &AdamConfig::default());
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = 1, v_hat = 1 after bias correction
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 0.001, &AdamConfig::default());
        let want = 0.001 / (1.0 + 1e-8);
        assert!((p[0] + want).abs() < 1e-18);
        assert!((p[0].abs() - 0.000999999990).abs() < 1e-14);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.3, -0.1];
            let mut s = AdamState::new(2);
            for k in 0..5 {
                let g = [0.5 - k as f64, 0.25 * k as f64];
                adam_step(&mut p, &g, &mut s, 0.01, &AdamConfig::default());
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }
}
