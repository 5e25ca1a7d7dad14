//! Per-granularity bottleneck adaptors trained with a norm-softmax
//! pseudo-label classifier.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    forward_features, prepare_input, BackboneParams, FeatureModel, LayerHook, LayerOutputs,
};
use crate::checkpoint::{Checkpoint, DType};
use crate::data::Image;
use crate::error::{GrappaError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, LinearVars, Parameters};
use crate::optim::{Adam, AdamConfig};
use crate::pseudolabels::PseudoLabelSet;

pub const ADAPTOR_KIND: &str = "adaptors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptorConfig {
    /// Bottleneck width `D'`; `None` means `D / 4`.
    pub bottleneck_dim: Option<usize>,
    /// Norm-softmax scale.
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub init_std: f64,
    /// Zero-init the up-projection so training starts at the frozen model.
    pub zero_init_up: bool,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        Self {
            bottleneck_dim: None,
            gamma: 25.0,
            epochs: 20,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            init_std: 0.02,
            zero_init_up: true,
        }
    }
}

impl AdaptorConfig {
    pub fn bottleneck_for(&self, dim: usize) -> Result<usize> {
        let b = self.bottleneck_dim.unwrap_or(dim / 4);
        if b == 0 || b >= dim {
            return Err(GrappaError::Config(format!(
                "bottleneck dim {b} must lie in [1, {dim})"
            )));
        }
        Ok(b)
    }
}

/// `x -> Up(GELU(Down(x)))`, used with a residual around it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorLayer {
    pub down: Linear,
    pub up: Linear,
}

pub struct AdaptorLayerVars {
    pub down: LinearVars,
    pub up: LinearVars,
}

impl AdaptorLayer {
    pub fn init(dim: usize, bottleneck: usize, std: f64, zero_up: bool, rng: &mut ChaCha8Rng) -> Self {
        let down = Linear::trunc_normal(dim, bottleneck, std, rng);
        let up = if zero_up {
            Linear::zeros(bottleneck, dim)
        } else {
            Linear::trunc_normal(bottleneck, dim, std, rng)
        };
        Self { down, up }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AdaptorLayerVars {
        AdaptorLayerVars {
            down: self.down.bind(g, trainable),
            up: self.up.bind(g, trainable),
        }
    }
}

impl AdaptorLayerVars {
    /// Bottleneck branch without the residual.
    pub fn branch(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.down.forward(g, x);
        let h = g.gelu(h);
        self.up.forward(g, h)
    }

    /// Branch plus residual: `Up(GELU(Down(x))) + x`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let b = self.branch(g, x);
        g.add(b, x)
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.down.weight, self.down.bias, self.up.weight, self.up.bias]
    }
}

/// Standalone adaptor forward on a token matrix.
pub fn adaptor_forward(h: &Array2<f64>, layer: &AdaptorLayer) -> Result<Array2<f64>> {
    if h.ncols() != layer.down.input_dim() {
        return Err(GrappaError::Shape(format!(
            "input dim {} vs adaptor dim {}",
            h.ncols(),
            layer.down.input_dim()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(h.clone());
    let vars = layer.bind(&mut g, false);
    let y = vars.forward(&mut g, x);
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptorProvenance {
    pub pseudo_label_k: usize,
    pub backbone_fingerprint: String,
    pub epochs: usize,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    pub accuracy_history: Vec<f64>,
}

/// `L` adaptor layers tied to one pseudo-label granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorSet {
    pub granularity: usize,
    pub layers: Vec<AdaptorLayer>,
    pub provenance: AdaptorProvenance,
}

impl Parameters for AdaptorSet {
    fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.down.named(&format!("layers.{l}.down"), &mut out);
            layer.up.named(&format!("layers.{l}.up"), &mut out);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            layer.down.collect_mut(&mut out);
            layer.up.collect_mut(&mut out);
        }
        out
    }
}

impl AdaptorSet {
    pub fn init(
        granularity: usize,
        backbone: &BackboneParams,
        config: &AdaptorConfig,
        seed: u64,
    ) -> Result<Self> {
        let dim = backbone.config.dim;
        let bottleneck = config.bottleneck_for(dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..backbone.config.num_layers)
            .map(|_| AdaptorLayer::init(dim, bottleneck, config.init_std, config.zero_init_up, &mut rng))
            .collect();
        Ok(Self {
            granularity,
            layers,
            provenance: AdaptorProvenance {
                backbone_fingerprint: backbone.fingerprint(),
                seed,
                ..AdaptorProvenance::default()
            },
        })
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.layers[0].down.output_dim()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<AdaptorLayerVars> {
        self.layers.iter().map(|l| l.bind(g, trainable)).collect()
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "granularity": self.granularity,
            "num_layers": self.layers.len(),
            "dim": self.layers[0].down.input_dim(),
            "bottleneck_dim": self.bottleneck_dim(),
            "provenance": self.provenance,
        });
        let mut ck = Checkpoint::new(ADAPTOR_KIND, meta);
        for (name, p) in self.named_params() {
            ck.push_float(name, DType::F64, p.clone());
        }
        ck.save(stem)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let ck = Checkpoint::load(stem)?;
        if ck.kind != ADAPTOR_KIND {
            return Err(GrappaError::Checkpoint(format!(
                "expected adaptors, found `{}`",
                ck.kind
            )));
        }
        let get = |k: &str| -> Result<usize> {
            ck.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| GrappaError::Checkpoint(format!("adaptor meta missing `{k}`")))
        };
        let (layers, dim, bottleneck) = (get("num_layers")?, get("dim")?, get("bottleneck_dim")?);
        let mut set = Self {
            granularity: get("granularity")?,
            layers: (0..layers)
                .map(|_| AdaptorLayer {
                    down: Linear::zeros(dim, bottleneck),
                    up: Linear::zeros(bottleneck, dim),
                })
                .collect(),
            provenance: serde_json::from_value(
                ck.meta.get("provenance").cloned().unwrap_or_default(),
            )?,
        };
        let shapes: Vec<(String, (usize, usize))> = set
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.dim()))
            .collect();
        for ((name, shape), slot) in shapes.into_iter().zip(set.params_mut()) {
            *slot = ck.float(&name, shape)?;
        }
        Ok(set)
    }

    pub fn check_compatible(&self, backbone: &BackboneParams) -> Result<()> {
        if self.layers.len() != backbone.config.num_layers
            || self.layers[0].down.input_dim() != backbone.config.dim
        {
            return Err(GrappaError::Shape(format!(
                "adaptor set {} has {} layers of dim {}, backbone has {} of dim {}",
                self.granularity,
                self.layers.len(),
                self.layers[0].down.input_dim(),
                backbone.config.num_layers,
                backbone.config.dim
            )));
        }
        Ok(())
    }
}

/// Residual adaptor after every layer: `h^l = A(h̄^l) + h̄^l`.
pub struct AdaptorHook<'a> {
    pub layers: &'a [AdaptorLayerVars],
}

impl LayerHook for AdaptorHook<'_> {
    fn after_layer(
        &mut self,
        g: &mut Graph,
        layer: usize,
        outputs: &LayerOutputs,
        _batch: usize,
        _tokens: usize,
    ) -> Result<Var> {
        Ok(self.layers[layer].forward(g, outputs.output))
    }
}

/// Frozen backbone with one adaptor set embedded.
pub struct AdaptedModel<'a> {
    pub backbone: &'a BackboneParams,
    pub adaptors: &'a AdaptorSet,
}

impl FeatureModel for AdaptedModel<'_> {
    fn backbone(&self) -> &BackboneParams {
        self.backbone
    }

    fn forward(&self, g: &mut Graph, input: Var, batch: usize) -> Result<Var> {
        let bv = self.backbone.bind(g);
        let layers = self.adaptors.bind(g, false);
        forward_features(g, &bv, input, batch, &mut AdaptorHook { layers: &layers })
    }
}

/// Cosine classifier used only while training; discarded afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSoftmaxHead {
    /// `(k, D)` class rows, normalized at use time.
    pub weight: Array2<f64>,
    pub gamma: f64,
}

impl NormSoftmaxHead {
    pub fn init(k: usize, dim: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: crate::nn::trunc_normal(k, dim, 1.0, rng),
            gamma,
        }
    }
}

fn ensure_nonzero_rows(m: &Array2<f64>, what: &str) -> Result<()> {
    match m.rows().into_iter().position(|r| r.dot(&r) == 0.0) {
        Some(i) => Err(GrappaError::ZeroNorm(format!("{what} row {i}"))),
        None => Ok(()),
    }
}

/// Mean of `-log softmax(γ cos θ)_y` over the batch, built into `g`.
pub fn norm_softmax_loss_graph(
    g: &mut Graph,
    z: Var,
    head_weight: Var,
    gamma: f64,
    labels: &[usize],
) -> Result<Var> {
    let k = g.shape(head_weight).0;
    if labels.len() != g.shape(z).0 {
        return Err(GrappaError::Shape(format!(
            "{} labels for {} features",
            labels.len(),
            g.shape(z).0
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(GrappaError::Data(format!("label {bad} outside [0, {k})")));
    }
    ensure_nonzero_rows(g.value(z), "feature")?;
    ensure_nonzero_rows(g.value(head_weight), "class weight")?;
    let zn = g.normalize_rows(z);
    let wn = g.normalize_rows(head_weight);
    let cos = g.matmul_nt(zn, wn);
    let logits = g.scale(cos, gamma);
    Ok(g.cross_entropy(logits, labels))
}

pub fn norm_softmax_loss(z: &Array2<f64>, labels: &[usize], head: &NormSoftmaxHead) -> Result<f64> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let w = g.constant(head.weight.clone());
    let loss = norm_softmax_loss_graph(&mut g, zv, w, head.gamma, labels)?;
    Ok(g.scalar(loss))
}

/// Norm-softmax loss of the adapted model on a batch and its gradients with
/// respect to every adaptor parameter followed by the head weight.
pub fn norm_softmax_objective(
    backbone: &BackboneParams,
    adaptors: &AdaptorSet,
    head: &NormSoftmaxHead,
    input: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Vec<Array2<f64>>, Array2<f64>)> {
    let batch = labels.len();
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let bv = backbone.bind(&mut g);
    let layers = adaptors.bind(&mut g, true);
    let w = g.param(head.weight.clone());
    let z = forward_features(&mut g, &bv, x, batch, &mut AdaptorHook { layers: &layers })?;
    let loss = norm_softmax_loss_graph(&mut g, z, w, head.gamma, labels)?;
    let grads = g.backward(loss);
    let mut out = Vec::new();
    for (l, vars) in layers.iter().enumerate() {
        let shapes = [
            adaptors.layers[l].down.weight.dim(),
            adaptors.layers[l].down.bias.dim(),
            adaptors.layers[l].up.weight.dim(),
            adaptors.layers[l].up.bias.dim(),
        ];
        for (v, s) in vars.vars().into_iter().zip(shapes) {
            out.push(grads.get_or_zeros(v, s));
        }
    }
    out.push(grads.get_or_zeros(w, head.weight.dim()));
    Ok((g.scalar(loss), out, g.value(z).clone()))
}

fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Index of the nearest class row by cosine for each feature.
pub fn predict(z: &Array2<f64>, head: &NormSoftmaxHead) -> Vec<usize> {
    let normed = |m: &Array2<f64>| {
        let mut out = m.clone();
        for mut r in out.rows_mut() {
            let n = r.dot(&r).sqrt();
            if n > 0.0 {
                r.mapv_inplace(|v| v / n);
            }
        }
        out
    };
    argmax_rows(&normed(z).dot(&normed(&head.weight).t()))
}

/// Rows of the prepared input belonging to the images in `idx`.
pub(crate) fn gather_tokens(input: &Array2<f64>, idx: &[usize], per_image: usize) -> Array2<f64> {
    let rows: Vec<usize> = idx
        .iter()
        .flat_map(|&i| i * per_image..(i + 1) * per_image)
        .collect();
    input.select(Axis(0), &rows)
}

#[derive(Debug, Clone)]
pub struct AdaptorTraining {
    pub adaptors: AdaptorSet,
    pub head: NormSoftmaxHead,
}

/// Trains one adaptor set (and a throwaway head) on pseudo-labels.
pub fn train_adaptor_set(
    backbone: &BackboneParams,
    images: &[Image],
    pseudo: &PseudoLabelSet,
    config: &AdaptorConfig,
    seed: u64,
) -> Result<AdaptorSet> {
    Ok(train_adaptor_set_with_head(backbone, images, pseudo, config, seed)?.adaptors)
}

/// As [`train_adaptor_set`] but also returns the classifier head.
pub fn train_adaptor_set_with_head(
    backbone: &BackboneParams,
    images: &[Image],
    pseudo: &PseudoLabelSet,
    config: &AdaptorConfig,
    seed: u64,
) -> Result<AdaptorTraining> {
    if !backbone.is_frozen() {
        return Err(GrappaError::Config("backbone must be frozen before adaptor training".into()));
    }
    if pseudo.assignments.len() != images.len() {
        return Err(GrappaError::Shape(format!(
            "{} pseudo-labels for {} images",
            pseudo.assignments.len(),
            images.len()
        )));
    }
    if config.batch_size == 0 {
        return Err(GrappaError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adaptors = AdaptorSet::init(pseudo.granularity, backbone, config, seed)?;
    let mut head = NormSoftmaxHead::init(pseudo.k, backbone.config.dim, config.gamma, &mut rng);
    let mut shapes: Vec<(usize, usize)> = adaptors.named_params().iter().map(|(_, p)| p.dim()).collect();
    shapes.push(head.weight.dim());
    let mut opt = Adam::new(config.optimizer.clone(), &shapes);

    let input = prepare_input(images, &backbone.config)?;
    let per_image = backbone.config.num_patches();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut accuracy_history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut correct = 0usize;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch_input = gather_tokens(&input, idx, per_image);
            let labels: Vec<usize> = idx.iter().map(|&i| pseudo.assignments[i]).collect();
            let (loss, grads, z) = norm_softmax_objective(backbone, &adaptors, &head, &batch_input, &labels)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.iter().all(|v| v.is_finite())) {
                return Err(GrappaError::Diverged { epoch, step });
            }
            correct += predict(&z, &head)
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            total += loss * idx.len() as f64;
            let mut params = adaptors.params_mut();
            params.push(&mut head.weight);
            opt.step(params, &grads);
        }
        loss_history.push(total / images.len() as f64);
        accuracy_history.push(correct as f64 / images.len() as f64);
    }
    adaptors.provenance = AdaptorProvenance {
        pseudo_label_k: pseudo.k,
        backbone_fingerprint: backbone.fingerprint(),
        epochs: config.epochs,
        seed,
        loss_history,
        accuracy_history,
    };
    Ok(AdaptorTraining { adaptors, head })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{extract_features, BackboneConfig};
    use ndarray::array;

    fn toy_config() -> BackboneConfig {
        BackboneConfig {
            image_height: 4,
            image_width: 4,
            channels: 1,
            patch_size: 2,
            num_layers: 2,
            dim: 8,
            num_heads: 2,
            mlp_hidden_dim: 8,
            pixel_mean: vec![0.5],
            pixel_std: vec![0.25],
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = AdaptorLayer::init(64, 16, 0.02, true, &mut rng);
        let h = crate::nn::trunc_normal(2 * 17, 64, 1.0, &mut rng);
        let out = adaptor_forward(&h, &layer).unwrap();
        assert_eq!(out.dim(), (34, 64));
        assert_eq!(out, h);
    }

    #[test]
    fn adaptor_matches_scalar_computation() {
        let layer = AdaptorLayer {
            down: Linear {
                weight: array![[0.7], [-0.4]],
                bias: array![[0.1]],
            },
            up: Linear {
                weight: array![[1.5, -0.5]],
                bias: array![[0.2, 0.0]],
            },
        };
        let x = [0.9, 0.3];
        let hidden = 0.7 * x[0] - 0.4 * x[1] + 0.1;
        let act = 0.5 * hidden * (1.0 + libm::erf(hidden / 2f64.sqrt()));
        let expected = [1.5 * act + 0.2 + x[0], -0.5 * act + x[1]];
        let out = adaptor_forward(&array![[0.9, 0.3]], &layer).unwrap();
        assert!((out[[0, 0]] - expected[0]).abs() < 1e-15);
        assert!((out[[0, 1]] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn norm_softmax_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = crate::nn::trunc_normal(5, 4, 1.0, &mut rng);
        let single = NormSoftmaxHead::init(1, 4, 25.0, &mut rng);
        assert!(norm_softmax_loss(&z, &[0; 5], &single).unwrap().abs() < 1e-15);
        let mut flat = NormSoftmaxHead::init(7, 4, 0.0, &mut rng);
        let loss = norm_softmax_loss(&z, &[0, 1, 2, 3, 6], &flat).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        flat.gamma = 25.0;
        let a = norm_softmax_loss(&z, &[0, 1, 2, 3, 6], &flat).unwrap();
        let b = norm_softmax_loss(&(&z * 13.7), &[0, 1, 2, 3, 6], &flat).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn norm_softmax_hand_value() {
        // cos θ = (0.9, 0.1) with unit rows; γ = 10, true class 0.
        let z = array![[1.0, 0.0]];
        let s = (1.0f64 - 0.81).sqrt();
        let t = (1.0f64 - 0.01).sqrt();
        let head = NormSoftmaxHead {
            weight: array![[0.9, s], [0.1, t]],
            gamma: 10.0,
        };
        let loss = norm_softmax_loss(&z, &[0], &head).unwrap();
        let expected = -(9f64.exp() / (9f64.exp() + 1f64.exp())).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 3.3535e-4).abs() < 1e-7);
    }

    #[test]
    fn zero_norm_is_rejected() {
        let head = NormSoftmaxHead {
            weight: array![[1.0, 0.0], [0.0, 1.0]],
            gamma: 1.0,
        };
        assert!(matches!(
            norm_softmax_loss(&array![[0.0, 0.0]], &[0], &head),
            Err(GrappaError::ZeroNorm(_))
        ));
        let bad = NormSoftmaxHead {
            weight: array![[1.0, 0.0], [0.0, 0.0]],
            gamma: 1.0,
        };
        assert!(matches!(
            norm_softmax_loss(&array![[1.0, 0.0]], &[0], &bad),
            Err(GrappaError::ZeroNorm(_))
        ));
    }

    #[test]
    fn zero_init_adaptors_reproduce_frozen_features() {
        let config = toy_config();
        let mut backbone = BackboneParams::random_init(&config, 3).unwrap();
        backbone.freeze();
        let set = AdaptorSet::init(0, &backbone, &AdaptorConfig::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let images: Vec<Image> = (0..3)
            .map(|_| {
                Image::new(4, 4, 1, crate::nn::trunc_normal(1, 16, 0.3, &mut rng).iter().map(|v| *v as f32 + 0.5).collect())
                    .unwrap()
            })
            .collect();
        let frozen = extract_features(&backbone, &images, 2).unwrap();
        let adapted = extract_features(&AdaptedModel { backbone: &backbone, adaptors: &set }, &images, 2).unwrap();
        assert_eq!(frozen, adapted);
    }

    #[test]
    fn checkpoint_round_trip() {
        let config = toy_config();
        let backbone = BackboneParams::random_init(&config, 3).unwrap();
        let mut set = AdaptorSet::init(
            1,
            &backbone,
            &AdaptorConfig {
                zero_init_up: false,
                ..AdaptorConfig::default()
            },
            9,
        )
        .unwrap();
        set.provenance.loss_history = vec![1.5, 0.25];
        let dir = tempfile::tempdir().unwrap();
        set.save(&dir.path().join("a1")).unwrap();
        assert_eq!(AdaptorSet::load(&dir.path().join("a1")).unwrap(), set);
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let config = toy_config();
        let mut backbone = BackboneParams::random_init(&config, 11).unwrap();
        backbone.freeze();
        let adaptor_config = AdaptorConfig {
            zero_init_up: false,
            init_std: 0.3,
            ..AdaptorConfig::default()
        };
        let set = AdaptorSet::init(0, &backbone, &adaptor_config, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let head = NormSoftmaxHead::init(3, config.dim, 4.0, &mut rng);
        let input = crate::nn::trunc_normal(3 * config.num_patches(), config.patch_dim(), 1.0, &mut rng);
        let labels = [0, 2, 1];
        let (_, grads, _) = norm_softmax_objective(&backbone, &set, &head, &input, &labels).unwrap();

        let loss_of = |set: &AdaptorSet, head: &NormSoftmaxHead| {
            norm_softmax_objective(&backbone, set, head, &input, &labels).unwrap().0
        };
        let step = 1e-5;
        let n = set.named_params().len();
        for t in 0..=n {
            let shape = grads[t].dim();
            let mut numeric = Array2::zeros(shape);
            for idx in ndarray::indices(shape) {
                let idx = (idx.0, idx.1);
                let eval = |delta: f64| {
                    let mut s = set.clone();
                    let mut h = head.clone();
                    if t < n {
                        s.params_mut()[t][idx] += delta;
                    } else {
                        h.weight[idx] += delta;
                    }
                    loss_of(&s, &h)
                };
                numeric[idx] = (eval(step) - eval(-step)) / (2.0 * step);
            }
            let diff = (&numeric - &grads[t]).mapv(|v| v * v).sum().sqrt();
            let scale = numeric.mapv(|v| v * v).sum().sqrt().max(grads[t].mapv(|v| v * v).sum().sqrt());
            assert!(scale == 0.0 || diff / scale < 1e-4, "tensor {t}: rel err {}", diff / scale);
        }
    }

    #[test]
    fn bottleneck_must_be_narrower() {
        let c = AdaptorConfig {
            bottleneck_dim: Some(8),
            ..AdaptorConfig::default()
        };
        assert!(c.bottleneck_for(8).is_err());
        assert_eq!(AdaptorConfig::default().bottleneck_for(64).unwrap(), 16);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn norm_softmax_is_scale_invariant(seed in 0u64..500, scale in 0.01f64..100.0, k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = crate::nn::trunc_normal(7, 5, 1.0, &mut rng);
            let head = NormSoftmaxHead::init(k, 5, 25.0, &mut rng);
            let labels: Vec<usize> = (0..7).map(|i| i % k).collect();
            let a = norm_softmax_loss(&z, &labels, &head).unwrap();
            let b = norm_softmax_loss(&(&z * scale), &labels, &head).unwrap();
            proptest::prop_assert!(a >= 0.0);
            proptest::prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }

        #[test]
        fn adaptor_preserves_shape(seed in 0u64..500, rows in 1usize..9, dim in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = AdaptorLayer::init(dim, dim / 2, 0.3, false, &mut rng);
            let h = crate::nn::trunc_normal(rows, dim, 1.0, &mut rng);
            let out = adaptor_forward(&h, &layer).unwrap();
            proptest::prop_assert_eq!(out.dim(), h.dim());
            proptest::prop_assert!(out.iter().all(|v| v.is_finite()));
        }
    }
}
