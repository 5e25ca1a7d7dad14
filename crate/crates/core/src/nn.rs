//! Parameter blocks shared by the backbone, adaptors, fusion and heads.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::graph::{Graph, Var};

/// Anything that owns named parameter tensors.
///
/// `named_params` and `params_mut` must enumerate tensors in the same order.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Array2<f64>)>;
    fn params_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// SHA-256 over parameter names, shapes and the exact bit patterns.
    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in self.named_params() {
            hasher.update(name.as_bytes());
            hasher.update((p.nrows() as u64).to_le_bytes());
            hasher.update((p.ncols() as u64).to_le_bytes());
            for v in p.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Samples `N(0, std²)` truncated to `[-2 std, 2 std]`, rounded through
/// `f32` so the values survive an `f32` checkpoint bit-exactly.
pub fn trunc_normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return f64::from(v as f32);
        }
    })
}

/// Affine map `x · W + b` with `W` stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn trunc_normal<R: Rng>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: trunc_normal(input, output, std, rng),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        let (weight, bias) = if trainable {
            (g.param(self.weight.clone()), g.param(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        };
        LinearVars { weight, bias }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<f64>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.matmul(x, self.weight);
        g.add_row(y, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    pub fn bind(&self, g: &mut Graph, eps: f64) -> LayerNormVars {
        LayerNormVars {
            gamma: g.constant(self.gamma.clone()),
            beta: g.constant(self.beta.clone()),
            eps,
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<f64>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

impl LayerNormVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.layer_norm(x, self.gamma, self.beta, self.eps)
    }
}
