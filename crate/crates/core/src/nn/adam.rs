use serde::{Deserialize, Serialize};

use super::MlpWeights;
use crate::error::{Error, Result};

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

/// First/second moment accumulators shaped like the network they update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: MlpWeights,
    second: MlpWeights,
}

impl AdamState {
    pub fn new(config: AdamConfig, like: &MlpWeights) -> Self {
        Self {
            config,
            step: 0,
            first: like.zeros_like(),
            second: like.zeros_like(),
        }
    }

    /// One bias-corrected adaptive-moment update of `weights` in place.
    pub fn step(&mut self, weights: &mut MlpWeights, grads: &MlpWeights) -> Result<()> {
        if !weights.same_shape(grads) || !weights.same_shape(&self.first) {
            return Err(Error::shape("optimizer, weights and gradients differ in shape"));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for (((w, &g), m), v) in weights
            .params_mut()
            .zip(grads.params())
            .zip(self.first.params_mut())
            .zip(self.second.params_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }

    pub fn moments(&self) -> (&MlpWeights, &MlpWeights) {
        (&self.first, &self.second)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarianceBounds;

    fn scalar_net(w: f64) -> MlpWeights {
        // a 1 -> [1] -> 1 net; only trunk[0].weight[[0, 0]] is exercised
        let mut net = MlpWeights::zeros(1, &[1], 1, VarianceBounds::default()).unwrap();
        net.trunk[0].weight[[0, 0]] = w;
        net
    }

    fn grad_of(net: &MlpWeights, g: f64) -> MlpWeights {
        let mut grads = net.zeros_like();
        grads.trunk[0].weight[[0, 0]] = g;
        grads
    }

    #[test]
    fn zero_gradient_leaves_weights_and_decays_moments() {
        let mut net = scalar_net(0.5);
        let mut opt = AdamState::new(AdamConfig::default(), &net);
        let g = grad_of(&net, 1.0);
        opt.step(&mut net, &g).unwrap();
        let after_one = net.clone();
        let m_before = opt.moments().0.trunk[0].weight[[0, 0]];
        let g = grad_of(&net, 0.0);
        opt.step(&mut net, &g).unwrap();
        let m_after = opt.moments().0.trunk[0].weight[[0, 0]];
        assert!(m_after.abs() < m_before.abs());
        // the bias-corrected first moment is still non-zero, so only a fresh
        // optimizer gives exact invariance
        let mut fresh = AdamState::new(AdamConfig::default(), &after_one);
        let mut w = after_one.clone();
        fresh.step(&mut w, &after_one.zeros_like()).unwrap();
        assert_eq!(w, after_one);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut net = scalar_net(0.0);
        let mut opt = AdamState::new(AdamConfig::default(), &net);
        for _ in 0..100 {
            let g = grad_of(&net, 2.5);
            opt.step(&mut net, &g).unwrap();
        }
        assert!(net.trunk[0].weight[[0, 0]] < 0.0);
        assert_eq!(opt.step, 100);
    }

    #[test]
    fn quadratic_step_reduces_magnitude() {
        // f(w) = w^2, w0 = 1, lr = 0.1: first Adam step moves by exactly lr.
        let mut net = scalar_net(1.0);
        let config = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = AdamState::new(config, &net);
        let g = grad_of(&net, 2.0 * net.trunk[0].weight[[0, 0]]);
        opt.step(&mut net, &g).unwrap();
        let w1 = net.trunk[0].weight[[0, 0]];
        assert!(w1.abs() < 1.0);
        assert!((w1 - 0.9).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut net = scalar_net(1.0);
        let other = MlpWeights::zeros(2, &[1], 1, VarianceBounds::default()).unwrap();
        let mut opt = AdamState::new(AdamConfig::default(), &net);
        assert!(opt.step(&mut net, &other).is_err());
    }
}
