//! Cross-correlation redundancy-reduction loss and its projector head.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GrappaError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, LinearVars, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarlowConfig {
    /// Off-diagonal weight.
    pub beta: f64,
    /// Multiplier on the objective used for training.
    pub loss_scale: f64,
    /// Projector width as a multiple of the feature dim.
    pub projector_multiplier: usize,
    /// Variance epsilon of the per-dimension standardization.
    pub standardize_eps: f64,
    /// Epsilon under the column norms of the correlation.
    pub norm_eps: f64,
}

impl Default for BarlowConfig {
    fn default() -> Self {
        Self {
            beta: 0.005,
            loss_scale: 0.024,
            projector_multiplier: 4,
            standardize_eps: 1e-5,
            norm_eps: 1e-12,
        }
    }
}

/// `Linear -> ReLU -> Linear`; used only while training fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct ProjectorVars {
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

impl Projector {
    pub fn init(dim: usize, hidden: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::trunc_normal(dim, hidden, std, rng),
            fc2: Linear::trunc_normal(hidden, hidden, std, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ProjectorVars {
        ProjectorVars {
            fc1: self.fc1.bind(g, trainable),
            fc2: self.fc2.bind(g, trainable),
        }
    }
}

impl ProjectorVars {
    pub fn forward(&self, g: &mut Graph, z: Var) -> Var {
        let h = self.fc1.forward(g, z);
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

impl Parameters for Projector {
    fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        self.fc1.named("projector.fc1", &mut out);
        self.fc2.named("projector.fc2", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        self.fc1.collect_mut(&mut out);
        self.fc2.collect_mut(&mut out);
        out
    }
}

/// Unscaled objective on already projected embeddings `(batch, d)`.
pub fn barlow_graph(g: &mut Graph, pa: Var, pb: Var, config: &BarlowConfig) -> Result<Var> {
    let (ba, da) = g.shape(pa);
    if g.shape(pb) != (ba, da) {
        return Err(GrappaError::Shape(format!(
            "paired embeddings {:?} vs {:?}",
            (ba, da),
            g.shape(pb)
        )));
    }
    if ba < 2 {
        return Err(GrappaError::Shape("correlation needs a batch of at least 2".into()));
    }
    let sa = g.standardize_cols(pa, config.standardize_eps);
    let sb = g.standardize_cols(pb, config.standardize_eps);
    let na = g.normalize_cols(sa, config.norm_eps);
    let nb = g.normalize_cols(sb, config.norm_eps);
    let c = g.matmul_tn(na, nb);
    Ok(g.barlow_objective(c, config.beta))
}

/// Unscaled objective of two feature batches, through `projector` when given.
pub fn barlow_twins_loss(
    za: &Array2<f64>,
    zb: &Array2<f64>,
    projector: Option<&Projector>,
    config: &BarlowConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut a = g.constant(za.clone());
    let mut b = g.constant(zb.clone());
    if let Some(p) = projector {
        let pv = p.bind(&mut g, false);
        a = pv.forward(&mut g, a);
        b = pv.forward(&mut g, b);
    }
    let loss = barlow_graph(&mut g, a, b, config)?;
    Ok(g.scalar(loss))
}

/// The correlation matrix the objective is computed from.
pub fn cross_correlation(za: &Array2<f64>, zb: &Array2<f64>, config: &BarlowConfig) -> Array2<f64> {
    let mut g = Graph::new();
    let a = g.constant(za.clone());
    let b = g.constant(zb.clone());
    let sa = g.standardize_cols(a, config.standardize_eps);
    let sb = g.standardize_cols(b, config.standardize_eps);
    let na = g.normalize_cols(sa, config.norm_eps);
    let nb = g.normalize_cols(sb, config.norm_eps);
    let c = g.matmul_tn(na, nb);
    g.value(c).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn perfectly_correlated_single_dimension() {
        let z = array![[0.3], [1.7], [-0.4], [2.0]];
        let loss = barlow_twins_loss(&z, &z, None, &BarlowConfig::default()).unwrap();
        assert!(loss.abs() < 1e-6, "{loss}");
    }

    #[test]
    fn orthogonal_columns_give_identity_correlation() {
        let z = array![[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]];
        let c = cross_correlation(&z, &z, &BarlowConfig::default());
        assert_relative_eq!(c[[0, 0]], 1.0, epsilon = 1e-5);
        assert_relative_eq!(c[[0, 1]], 0.0, epsilon = 1e-12);
        let loss = barlow_twins_loss(&z, &z, None, &BarlowConfig::default()).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn hand_evaluated_small_batch() {
        let za = array![[1.0, 2.0], [2.0, 0.0], [3.0, 1.0]];
        let zb = array![[2.0, 1.0], [1.0, 1.0], [0.0, 4.0]];
        let config = BarlowConfig {
            standardize_eps: 0.0,
            norm_eps: 0.0,
            ..BarlowConfig::default()
        };
        // Centered columns: a1 = (-1, 0, 1), a2 = (1, -1, 0), b1 = (1, 0, -1), b2 = (-1, -1, 2).
        // Standardization then column normalization reduces to unit columns,
        // so C is the matrix of cosines between centered columns.
        let cos = |x: [f64; 3], y: [f64; 3]| {
            let d: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let n = |v: [f64; 3]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            d / (n(x) * n(y))
        };
        let (a1, a2, b1, b2) = ([-1.0, 0.0, 1.0], [1.0, -1.0, 0.0], [1.0, 0.0, -1.0], [-1.0, -1.0, 2.0]);
        let c = [[cos(a1, b1), cos(a1, b2)], [cos(a2, b1), cos(a2, b2)]];
        let expected = (1.0 - c[0][0]).powi(2) + (1.0 - c[1][1]).powi(2) + 0.005 * (c[0][1].powi(2) + c[1][0].powi(2));
        let loss = barlow_twins_loss(&za, &zb, None, &config).unwrap();
        assert_relative_eq!(loss, expected, max_relative = 1e-12);
        assert_relative_eq!(c[0][0], -1.0, max_relative = 1e-12);
    }

    #[test]
    fn symmetric_under_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let za = crate::nn::trunc_normal(6, 5, 1.0, &mut rng);
        let zb = crate::nn::trunc_normal(6, 5, 1.0, &mut rng);
        let p = Projector::init(5, 8, 0.5, &mut rng);
        let c = BarlowConfig::default();
        let ab = barlow_twins_loss(&za, &zb, Some(&p), &c).unwrap();
        let ba = barlow_twins_loss(&zb, &za, Some(&p), &c).unwrap();
        assert!((ab - ba).abs() < 1e-10);
    }

    #[test]
    fn constant_dimension_stays_finite() {
        let z = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let loss = barlow_twins_loss(&z, &z, None, &BarlowConfig::default()).unwrap();
        assert!(loss.is_finite());
        assert_relative_eq!(loss, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn tiny_batch_rejected() {
        let z = array![[1.0, 2.0]];
        assert!(barlow_twins_loss(&z, &z, None, &BarlowConfig::default()).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn objective_is_symmetric_and_nonnegative(seed in 0u64..500, n in 3usize..12, d in 1usize..5) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let za = crate::nn::trunc_normal(n, d, 1.0, &mut rng);
            let zb = crate::nn::trunc_normal(n, d, 1.0, &mut rng);
            let config = BarlowConfig::default();
            let ab = barlow_twins_loss(&za, &zb, None, &config).unwrap();
            let ba = barlow_twins_loss(&zb, &za, None, &config).unwrap();
            proptest::prop_assert!(ab >= 0.0);
            proptest::prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            let c = cross_correlation(&za, &zb, &config);
            let ct = cross_correlation(&zb, &za, &config);
            proptest::prop_assert!((&c.t() - &ct).iter().all(|v| v.abs() < 1e-12));
        }
    }
}
