use serde::{Deserialize, Serialize};

use super::{Parameter, ParamStore, Tensor};

/// Adam hyperparameters. Weight decay is L2-coupled: it is added to the
/// gradient before the moment updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn for_param(p: &Parameter) -> Self {
        let (r, c) = (p.value.rows(), p.value.cols());
        AdamState {
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            step: 0,
        }
    }
}

/// One Adam update of `p` from its current gradient.
pub fn adam_step(cfg: &AdamConfig, state: &mut AdamState, p: &mut Parameter) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let value = p.value.data_mut();
    let grad = p.grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..value.len() {
        let g = grad[i] + cfg.weight_decay * value[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam over every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            states: store.params().iter().map(AdamState::for_param).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        for (state, p) in self.states.iter_mut().zip(store.params_mut()) {
            adam_step(&self.config, state, p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> Parameter {
        let mut p = Parameter::new(Tensor::scalar(v));
        p.grad = Tensor::scalar(g);
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = scalar_param(1.5, 0.0);
        let mut s = AdamState::for_param(&p);
        for _ in 0..5 {
            adam_step(&cfg, &mut s, &mut p);
        }
        assert_eq!(p.value.item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            eps: 0.0,
            ..AdamConfig::default()
        };
        for g in [1e-3, -2.0, 40.0] {
            let mut p = scalar_param(0.0, g);
            let mut s = AdamState::for_param(&p);
            adam_step(&cfg, &mut s, &mut p);
            assert!((p.value.item().abs() - cfg.lr).abs() < 1e-15);
            assert_eq!(p.value.item().signum(), -g.signum());
        }
    }

    #[test]
    fn decay_alone_shrinks_toward_zero() {
        let cfg = AdamConfig::default();
        for start in [2.0, -0.7] {
            let mut p = scalar_param(start, 0.0);
            let mut s = AdamState::for_param(&p);
            let mut prev = start.abs();
            for _ in 0..10 {
                adam_step(&cfg, &mut s, &mut p);
                let now = p.value.item().abs();
                assert!(now < prev);
                prev = now;
            }
        }
    }

    #[test]
    fn matches_reference_trace() {
        // Reference trace written out by hand from the update rule.
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            eps: 1e-8,
        };
        let grads = [0.5, -0.25, 1.0];
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut p = scalar_param(1.0, 0.0);
        let mut s = AdamState::for_param(&p);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            let ge = g + 0.01 * x;
            m = 0.9 * m + 0.1 * ge;
            v = 0.98 * v + 0.02 * ge * ge;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.98f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);

            p.grad = Tensor::scalar(*g);
            adam_step(&cfg, &mut s, &mut p);
            assert!((p.value.item() - x).abs() < 1e-12);
        }
        assert_eq!(s.step, 3);
    }
}
