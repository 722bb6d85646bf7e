use serde::{Deserialize, Serialize};

use super::{Classifier, Network};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Momentum SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Momentum SGD with coupled weight decay:
/// `buf ← μ·buf + g + wd·θ`, `θ ← θ − lr·buf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub buffer: Vec<f32>,
}

impl Sgd {
    pub fn new(config: SgdConfig, num_params: usize) -> Self {
        Self {
            config,
            buffer: vec![0.0; num_params],
        }
    }

    pub fn reset(&mut self) {
        self.buffer.fill(0.0);
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.buffer.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, {} gradients, {} momentum slots",
                params.len(),
                grads.len(),
                self.buffer.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient[{i}]")));
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for ((p, &g), b) in params.iter_mut().zip(grads).zip(&mut self.buffer) {
            *b = momentum * *b + g + weight_decay * *p;
            *p -= lr * *b;
        }
        Ok(())
    }
}

/// Everything the training loop mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Network<f32>,
    pub optimizer: Sgd,
    pub epoch: usize,
    pub rng: Stream,
}

impl TrainState {
    pub fn new(model: Network<f32>, config: SgdConfig, rng: Stream) -> Self {
        let n = model.params().len();
        Self {
            model,
            optimizer: Sgd::new(config, n),
            epoch: 0,
            rng,
        }
    }

    pub fn sgd_step(&mut self, grads: &[f32], lr: f32) -> Result<()> {
        self.optimizer
            .step(self.model.params_mut().data_mut(), grads, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgd(momentum: f32, weight_decay: f32, n: usize) -> Sgd {
        Sgd::new(
            SgdConfig {
                lr: 0.1,
                momentum,
                weight_decay,
            },
            n,
        )
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = sgd(0.9, 0.0, 3);
        let mut p = [1.0, -2.0, 3.5];
        for _ in 0..5 {
            opt.step(&mut p, &[0.0; 3], 0.1).unwrap();
        }
        assert_eq!(p, [1.0, -2.0, 3.5]);
    }

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let mut opt = sgd(0.0, 0.0, 2);
        let mut p = [1.0f32, 2.0];
        opt.step(&mut p, &[0.5, -1.0], 0.1).unwrap();
        assert_eq!(p, [1.0 - 0.1 * 0.5, 2.0 + 0.1]);
    }

    #[test]
    fn non_finite_gradients_rejected() {
        let mut opt = sgd(0.9, 0.0, 2);
        let mut p = [0.0f32; 2];
        assert!(matches!(
            opt.step(&mut p, &[0.0, f32::NAN], 0.1),
            Err(Error::NonFinite(_))
        ));
    }

    /// f(θ) = ½ Σ a_i (θ_i − c_i)²; with weight decay wd the fixed point is
    /// a_i c_i / (a_i + wd).
    fn quadratic(momentum: f32, wd: f32, lr: f32) -> (Vec<f32>, Vec<f32>) {
        let a = [1.0f32, 2.0, 0.5];
        let c = [3.0f32, -1.0, 0.25];
        let mut opt = sgd(momentum, wd, 3);
        let mut p = vec![0.0f32; 3];
        for _ in 0..100 {
            let g: Vec<f32> = (0..3).map(|i| a[i] * (p[i] - c[i])).collect();
            opt.step(&mut p, &g, lr).unwrap();
        }
        let min = (0..3).map(|i| a[i] * c[i] / (a[i] + wd)).collect();
        (p, min)
    }

    #[test]
    fn quadratic_bowl_converges() {
        for (momentum, wd) in [(0.5, 0.0), (0.5, 0.1), (0.0, 0.0)] {
            let (p, min) = quadratic(momentum, wd, 0.5);
            for (x, m) in p.iter().zip(&min) {
                assert!((x - m).abs() < 1e-6, "{p:?} vs {min:?}");
            }
        }
    }
}
