//! AdamW parameter updates with decoupled weight decay, plus global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use super::params::Parameters;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moment accumulators per parameter tensor plus the step count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(params: &Parameters, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// One decoupled-weight-decay update. `grads` must be shaped like the
    /// parameter set (one buffer per tensor, registration order).
    pub fn apply(&mut self, params: &mut Parameters, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as f64;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (idx, tensor) in params.tensors.iter_mut().enumerate() {
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let g = &grads[idx];
            debug_assert_eq!(g.len(), tensor.data.len());
            for i in 0..tensor.data.len() {
                if c.weight_decay != 0.0 {
                    tensor.data[i] *= 1.0 - c.learning_rate * c.weight_decay;
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> Parameters {
        let mut p = Parameters::new();
        p.register("w", 1, 1, vec![value]);
        p
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters_unchanged() {
        let mut params = single_param(0.7);
        let mut state = AdamWState::new(&params, AdamWConfig::new(1e-2, 0.0));
        state.apply(&mut params, &[vec![0.0]]);
        assert_eq!(params.get(super::super::params::ParamId(0)).data[0], 0.7);
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // With m = (1-b1)g, v = (1-b2)g^2 and bias correction, the first step
        // is exactly lr * g / (|g| + eps).
        let g: f64 = 0.37;
        let lr = 1e-3;
        let eps = 1e-8;
        let expected = 0.5 - lr * g / (g.abs() + eps);

        let mut params = single_param(0.5);
        let mut state = AdamWState::new(&params, AdamWConfig::new(lr, 0.0));
        state.apply(&mut params, &[vec![g]]);
        let got = params.tensors[0].data[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");

        // Negative gradient moves the parameter up by the same magnitude.
        let mut params = single_param(0.5);
        let mut state = AdamWState::new(&params, AdamWConfig::new(lr, 0.0));
        state.apply(&mut params, &[vec![-g]]);
        let got_neg = params.tensors[0].data[0];
        assert!((got_neg - (0.5 + lr * g / (g.abs() + eps))).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let lr = 1e-2;
        let wd = 0.1;
        let mut params = single_param(1.0);
        let mut state = AdamWState::new(&params, AdamWConfig::new(lr, wd));
        state.apply(&mut params, &[vec![0.0]]);
        // Zero gradient: only the decay multiplier acts.
        assert!((params.tensors[0].data[0] - (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut params = single_param(0.25);
            let mut state = AdamWState::new(&params, AdamWConfig::new(3e-4, 0.01));
            for i in 0..50 {
                let g = (i as f64 * 0.1).sin();
                state.apply(&mut params, &[vec![g]]);
            }
            params.tensors[0].data[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = vec![vec![3.0, 0.0], vec![4.0]];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let after: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((after - 1.0).abs() < 1e-12);

        let mut small = vec![vec![0.1, 0.2]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], vec![0.1, 0.2]);
    }
}
