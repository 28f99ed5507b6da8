use serde::{Deserialize, Serialize};

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 coefficient added to the gradient of decayed parameters.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One trainable parameter array and its gradient.
pub struct ParamMut<'a> {
    pub name: String,
    pub value: &'a mut [Scalar],
    pub grad: &'a [Scalar],
    /// Whether weight decay applies (conv/linear weights only).
    pub decay: bool,
}

/// First and second moments per parameter array plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<Scalar>>,
    pub v: Vec<Vec<Scalar>>,
}

/// One bias-corrected Adam update over every parameter array, in order.
pub fn adam_step(params: &mut [ParamMut<'_>], state: &mut AdamState, cfg: &AdamConfig) {
    if state.m.len() != params.len() {
        state.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = cfg.beta1 as Scalar;
    let b2 = cfg.beta2 as Scalar;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.lr as Scalar;
    let eps = cfg.eps as Scalar;
    let wd = cfg.weight_decay as Scalar;
    for (p, (m, v)) in params.iter_mut().zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..p.value.len() {
            let mut g = p.grad[i];
            if p.decay {
                g += wd * p.value[i];
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(value: &mut [Scalar], grad: &[Scalar], cfg: &AdamConfig, state: &mut AdamState) {
        let mut params = [ParamMut { name: "p".into(), value, grad, decay: true }];
        adam_step(&mut params, state, cfg);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut v = vec![1.0, -2.0, 3.0];
        let mut state = AdamState::default();
        for _ in 0..3 {
            one_step(&mut v, &[0.0; 3], &AdamConfig::default(), &mut state);
        }
        assert_eq!(v, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn first_step_hand_value() {
        // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + eps)
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut v = vec![0.0];
        one_step(&mut v, &[1.0], &cfg, &mut AdamState::default());
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((v[0] - expected).abs() < 1e-15, "{}", v[0]);
        assert!((v[0] + 0.099_999_999).abs() < 1e-12);
    }

    #[test]
    fn second_step_hand_value() {
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut v = vec![0.5];
        let mut state = AdamState::default();
        one_step(&mut v, &[2.0], &cfg, &mut state);
        one_step(&mut v, &[-1.0], &cfg, &mut state);
        let m1: f64 = 0.1 * 2.0;
        let v1: f64 = 0.001 * 4.0;
        let x1 = 0.5 - 0.01 * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-8);
        let m2 = 0.9 * m1 + 0.1 * -1.0;
        let v2 = 0.999 * v1 + 0.001 * 1.0;
        let x2 = x1 - 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.998001)).sqrt() + 1e-8);
        assert!((v[0] as f64 - x2).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut a = vec![0.3, 0.3];
        let mut state = AdamState::default();
        for g in [0.5, -0.2, 1.5] {
            one_step(&mut a, &[g, g], &AdamConfig::default(), &mut state);
        }
        assert_eq!(a[0], a[1]);
    }

    #[test]
    fn weight_decay_only_on_decayed_params() {
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut w = vec![1.0];
        let mut b = vec![1.0];
        let mut state = AdamState::default();
        let mut params = [
            ParamMut { name: "w".into(), value: &mut w, grad: &[0.0], decay: true },
            ParamMut { name: "b".into(), value: &mut b, grad: &[0.0], decay: false },
        ];
        adam_step(&mut params, &mut state, &cfg);
        assert!(w[0] < 1.0);
        assert_eq!(b[0], 1.0);
    }
}
