//! Stochastic gradient descent with heavy-ball momentum.

use crate::model::ModelState;

/// `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(model: &ModelState, momentum: f64) -> Self {
        Self { momentum, velocity: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn step(&mut self, model: &mut ModelState, grads: &ModelState, lr: f64) {
        let grads = grads.tensors();
        for ((param, grad), vel) in model.tensors_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            assert_eq!(param.len(), vel.len(), "model layout changed during a session");
            for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BackboneConfig, ImageShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_steps_follow_the_momentum_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BackboneConfig { input: ImageShape::new(4, 4, 1), conv_channels: vec![2], feature_dim: 3 };
        let mut m = ModelState::new(cfg, &mut rng).unwrap();
        m.grow_heads(2, &mut rng).unwrap();
        let start = m.clone();
        let mut g = m.zeros_like();
        g.tensors_mut().into_iter().flatten().for_each(|v| *v = 1.0);
        let mut opt = MomentumSgd::new(&m, 0.9);
        opt.step(&mut m, &g, 0.1);
        opt.step(&mut m, &g, 0.1);
        for (a, b) in m.tensors().iter().zip(start.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((y - x - 0.1 * (1.0 + 1.9)).abs() < 1e-12);
            }
        }
    }
}
