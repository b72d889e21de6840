use serde::{Deserialize, Serialize};

use crate::tensor::{Matrix, Scalar};

/// Training hyper-parameters shared by the classifier and the language model.
/// Defaults are the classifier fine-tuning settings (AdamW, 3e-5, weight
/// decay 0.01, 5 epochs, batches of 16).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warm-up from 0 to `learning_rate` over this many steps.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            learning_rate: 3e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Language-model settings: 5e-4 with eps 1e-8, 100 warm-up steps,
    /// 5 epochs, batches of 16.
    pub fn language_model() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 0.0,
            warmup_steps: 100,
            ..Self::default()
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW<T> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[Matrix<T>], cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>], lr: f64) {
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - self.beta1.powi(self.t));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t));
        let lr_t = T::of(lr);
        let decay = T::of(lr * self.weight_decay);
        let eps = T::of(self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let ps = p.as_mut_slice();
            let gs = g.as_slice();
            let ms = m.as_mut_slice();
            let vs = v.as_mut_slice();
            for i in 0..ps.len() {
                ms[i] = b1 * ms[i] + (one - b1) * gs[i];
                vs[i] = b2 * vs[i] + (one - b2) * gs[i] * gs[i];
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                ps[i] = ps[i] - decay * ps[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
