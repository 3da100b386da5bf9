use serde::{Deserialize, Serialize};

use super::{Gradients, Mlp};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Gradients<S>,
    pub second_moment: Gradients<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(model: &Mlp<S>, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first_moment: Gradients::zeros_like(model),
            second_moment: Gradients::zeros_like(model),
        }
    }

    pub fn apply(&mut self, model: &mut Mlp<S>, grads: &Gradients<S>) {
        self.step += 1;
        let b1 = S::lit(self.config.beta1);
        let b2 = S::lit(self.config.beta2);
        let one = S::one();
        let t = self.step as i32;
        let lr_t = S::lit(
            self.config.learning_rate * (1.0 - self.config.beta2.powi(t)).sqrt()
                / (1.0 - self.config.beta1.powi(t)),
        );
        // epsilon applied to the bias-corrected second moment
        let eps = S::lit(self.config.epsilon * (1.0 - self.config.beta2.powi(t)).sqrt());

        for (li, layer) in model.layers.iter_mut().enumerate() {
            let g = &grads.layers[li];
            let m = &mut self.first_moment.layers[li];
            let v = &mut self.second_moment.layers[li];
            let groups = [
                (&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights),
                (&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias),
            ];
            for (p, g, m, v) in groups {
                for k in 0..p.len() {
                    let gk = g[k];
                    m[k] = b1 * m[k] + (one - b1) * gk;
                    v[k] = b2 * v[k] + (one - b2) * gk * gk;
                    p[k] = p[k] - lr_t * m[k] / (v[k].sqrt() + eps);
                }
            }
        }
    }
}

/// `(params', state')` without mutating the inputs.
pub fn optimizer_step<S: Scalar>(
    model: &Mlp<S>,
    grads: &Gradients<S>,
    state: &Adam<S>,
) -> (Mlp<S>, Adam<S>) {
    let mut m = model.clone();
    let mut s = state.clone();
    s.apply(&mut m, grads);
    (m, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Activation, Architecture};

    fn tiny() -> Mlp<f64> {
        Mlp::init(
            Architecture {
                input_dim: 3,
                hidden: vec![2],
                outputs: 6,
                activation: Activation::Tanh,
            },
            4,
        )
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let m = tiny();
        let state = Adam::new(&m, AdamConfig::default());
        let (m2, s2) = optimizer_step(&m, &Gradients::zeros_like(&m), &state);
        assert_eq!(m2, m);
        assert_eq!(s2.step, 1);
    }

    #[test]
    fn constant_gradient_update_tends_to_learning_rate() {
        // With g constant, m_hat = g and v_hat = g^2 exactly after bias
        // correction, so each step moves lr * g / (|g| + eps).
        let m = tiny();
        let mut g = Gradients::zeros_like(&m);
        for (i, v) in g.layers[0].weights.iter_mut().enumerate() {
            *v = 0.5 + i as f64;
        }
        let mut state = Adam::new(&m, AdamConfig::default());
        let mut model = m.clone();
        let mut last = 0.0;
        for _ in 0..200 {
            let before = model.layers[0].weights[1];
            state.apply(&mut model, &g);
            last = before - model.layers[0].weights[1];
        }
        let expected = 1e-3 * 1.5 / (1.5 + 1e-8);
        assert!((last - expected).abs() < 1e-12, "{last} vs {expected}");
        assert_eq!(state.step, 200);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let m = tiny();
        let mut g = Gradients::zeros_like(&m);
        g.layers[1].bias[2] = -0.25;
        let (m2, _) = optimizer_step(&m, &g, &Adam::new(&m, AdamConfig::default()));
        // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
        let expected = m.layers[1].bias[2] + 1e-3 * 0.25 / (0.25 + 1e-8);
        assert!((m2.layers[1].bias[2] - expected).abs() < 1e-15);
    }

    #[test]
    fn deterministic() {
        let m = tiny();
        let mut g = Gradients::zeros_like(&m);
        g.layers[0].weights[0] = 0.3;
        let s = Adam::new(&m, AdamConfig::default());
        assert_eq!(optimizer_step(&m, &g, &s), optimizer_step(&m, &g, &s));
    }
}
