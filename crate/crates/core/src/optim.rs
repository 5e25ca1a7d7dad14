//! First-order optimizers over lists of parameter tensors.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            Zip::from(p)
                .and(g)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    let g = g + c.weight_decay * *p;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                });
        }
    }
}

/// LARS with momentum; weight decay and trust-ratio scaling are skipped for
/// tensors flagged as non-adapted (biases).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LarsConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub eta: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            weight_decay: 1e-3,
            momentum: 0.9,
            eta: 1e-3,
        }
    }
}

pub struct Lars {
    config: LarsConfig,
    mu: Vec<Array2<f64>>,
    adapt: Vec<bool>,
}

impl Lars {
    /// `adapt[i]` selects weight decay and trust-ratio scaling for tensor `i`.
    pub fn new(config: LarsConfig, shapes: &[(usize, usize)], adapt: Vec<bool>) -> Self {
        assert_eq!(shapes.len(), adapt.len());
        Self {
            config,
            mu: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            adapt,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        let c = &self.config;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let mut dp = g.clone();
            if self.adapt[i] {
                dp.scaled_add(c.weight_decay, p);
                let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let u_norm = dp.iter().map(|v| v * v).sum::<f64>().sqrt();
                let q = if p_norm > 0.0 && u_norm > 0.0 {
                    c.eta * p_norm / u_norm
                } else {
                    1.0
                };
                dp *= q;
            }
            let mu = &mut self.mu[i];
            *mu *= c.momentum;
            *mu += &dp;
            p.scaled_add(-c.lr, mu);
        }
    }
}
