//! Training of the fusion projections with a paired consistency loss or
//! with class labels.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::barlow::{barlow_graph, BarlowConfig, Projector};
use super::model::{fusion_named, mean_entropy, FusionLayer, FusionLayerVars, FusionMode, GrappaModel};
use super::neighbors::{build_knn_graph, sample_pairs, NeighborGraph, PairVariant};
use crate::adaptors::{norm_softmax_loss_graph, predict, NormSoftmaxHead};
use crate::backbone::{extract_features, prepare_input};
use crate::data::{AugmentPolicy, Image};
use crate::error::{GrappaError, Result};
use crate::graph::Graph;
use crate::nn::Parameters;
use crate::optim::{Adam, AdamConfig, Lars, LarsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    /// Uniform weights, nothing trained.
    Avg,
    /// Pairs are two augmentations of an image.
    Tc,
    /// Pairs are feature-space neighbors.
    Ac,
}

impl FusionVariant {
    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Avg => "avg",
            FusionVariant::Tc => "tc",
            FusionVariant::Ac => "ac",
        }
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = GrappaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Self::Avg),
            "tc" => Ok(Self::Tc),
            "ac" => Ok(Self::Ac),
            other => Err(GrappaError::Config(format!("unknown fusion variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedFusionConfig {
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for SupervisedFusionConfig {
    fn default() -> Self {
        Self {
            gamma: 25.0,
            epochs: 20,
            batch_size: 64,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub k_nn: usize,
    pub barlow: BarlowConfig,
    pub optimizer: LarsConfig,
    pub augment: AugmentPolicy,
    /// Std of the truncated-normal query init.
    pub init_std: f64,
    /// Std of the key init; zero keeps the initial weights exactly uniform.
    pub key_init_std: f64,
    /// Images per chunk when extracting features for neighbor search.
    pub feature_chunk: usize,
    pub supervised: SupervisedFusionConfig,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            k_nn: 5,
            barlow: BarlowConfig::default(),
            optimizer: LarsConfig::default(),
            augment: AugmentPolicy::default(),
            init_std: 0.02,
            key_init_std: 0.0,
            feature_chunk: 64,
            supervised: SupervisedFusionConfig::default(),
        }
    }
}

/// Everything the consistency objective updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrainables {
    pub fusion: Vec<FusionLayer>,
    pub projector: Projector,
}

impl Parameters for FusionTrainables {
    fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = fusion_named(&self.fusion);
        out.extend(self.projector.named_params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for f in &mut self.fusion {
            out.push(&mut f.query);
            out.push(&mut f.key);
        }
        out.extend(self.projector.params_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Mean entropy (nats) of the attention weights seen during the epoch.
    pub attention_entropy: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionTraining {
    pub model: GrappaModel,
    pub log: Vec<FusionEpochLog>,
}

/// Scaled consistency loss of two prepared views, its gradients in
/// [`FusionTrainables`] order, and the first view's attention weights.
pub fn consistency_objective(
    model: &GrappaModel,
    trainables: &FusionTrainables,
    input_a: &Array2<f64>,
    input_b: &Array2<f64>,
    batch: usize,
    config: &BarlowConfig,
) -> Result<(f64, Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    let mut g = Graph::new();
    let fusion: Vec<FusionLayerVars> = trainables
        .fusion
        .iter()
        .map(|f| FusionLayerVars {
            query: g.param(f.query.clone()),
            key: g.param(f.key.clone()),
        })
        .collect();
    let projector = trainables.projector.bind(&mut g, true);
    let xa = g.constant(input_a.clone());
    let xb = g.constant(input_b.clone());
    let (za, alphas) = model.forward_with(&mut g, xa, batch, &fusion)?;
    let (zb, _) = model.forward_with(&mut g, xb, batch, &fusion)?;
    let pa = projector.forward(&mut g, za);
    let pb = projector.forward(&mut g, zb);
    let raw = barlow_graph(&mut g, pa, pb, config)?;
    let loss = g.scale(raw, config.loss_scale);
    let grads = g.backward(loss);
    let mut vars = Vec::new();
    for f in &fusion {
        vars.push(f.query);
        vars.push(f.key);
    }
    vars.extend([projector.fc1.weight, projector.fc1.bias, projector.fc2.weight, projector.fc2.bias]);
    let out = vars
        .iter()
        .zip(trainables.named_params())
        .map(|(&v, (_, p))| grads.get_or_zeros(v, p.dim()))
        .collect();
    Ok((
        g.scalar(loss),
        out,
        alphas.iter().map(|&a| g.value(a).clone()).collect(),
    ))
}

fn check_frozen(model: &GrappaModel) -> Result<()> {
    if !model.backbone.is_frozen() {
        return Err(GrappaError::Config("backbone must be frozen before fusion training".into()));
    }
    Ok(())
}

fn all_finite(grads: &[Array2<f64>]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}

/// Trains the fusion projections on unlabeled images. `Avg` returns the
/// model switched to uniform weights without training.
pub fn train_fusion(
    mut model: GrappaModel,
    images: &[Image],
    variant: FusionVariant,
    config: &FusionTrainConfig,
    seed: u64,
) -> Result<FusionTraining> {
    check_frozen(&model)?;
    model.provenance.variant = variant.name().to_string();
    model.provenance.seed = seed;
    let pairing = match variant {
        FusionVariant::Avg => {
            model.mode = FusionMode::Average;
            return Ok(FusionTraining { model, log: Vec::new() });
        }
        FusionVariant::Tc => PairVariant::Tc,
        FusionVariant::Ac => PairVariant::Ac,
    };
    model.mode = FusionMode::Attention;
    if config.batch_size < 2 || images.len() < 2 {
        return Err(GrappaError::Config("fusion training needs batches of at least two images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.backbone.config.dim;
    let hidden = dim * config.barlow.projector_multiplier;
    let mut trainables = FusionTrainables {
        fusion: model.fusion.clone(),
        projector: Projector::init(dim, hidden, (1.0 / dim as f64).sqrt(), &mut rng),
    };
    let shapes: Vec<(usize, usize)> = trainables.named_params().iter().map(|(_, p)| p.dim()).collect();
    let adapt: Vec<bool> = trainables
        .named_params()
        .iter()
        .map(|(n, _)| !n.ends_with(".bias"))
        .collect();
    let mut opt = Lars::new(config.optimizer.clone(), &shapes, adapt);
    let cfg = &model.backbone.config.clone();

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let graph: Option<NeighborGraph> = if pairing == PairVariant::Ac {
            model.fusion = trainables.fusion.clone();
            let feats = extract_features(&model, images, config.feature_chunk)?;
            Some(build_knn_graph(&feats, config.k_nn, epoch)?)
        } else {
            None
        };
        order.shuffle(&mut rng);
        let (mut total, mut seen, mut entropy, mut steps) = (0.0, 0usize, 0.0, 0usize);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let (va, vb) = sample_pairs(pairing, images, idx, graph.as_ref(), &config.augment, &mut rng)?;
            let (ia, ib) = (prepare_input(&va, cfg)?, prepare_input(&vb, cfg)?);
            let (loss, grads, alphas) =
                consistency_objective(&model, &trainables, &ia, &ib, idx.len(), &config.barlow)?;
            if !loss.is_finite() || !all_finite(&grads) {
                return Err(GrappaError::Diverged { epoch, step });
            }
            opt.step(trainables.params_mut(), &grads);
            total += loss * idx.len() as f64;
            seen += idx.len();
            entropy += mean_entropy(&alphas);
            steps += 1;
        }
        log.push(FusionEpochLog {
            epoch,
            loss: total / seen.max(1) as f64,
            attention_entropy: entropy / steps.max(1) as f64,
            accuracy: None,
        });
    }
    model.fusion = trainables.fusion;
    model.provenance.loss_history = log.iter().map(|l| l.loss).collect();
    model.provenance.entropy_history = log.iter().map(|l| l.attention_entropy).collect();
    Ok(FusionTraining { model, log })
}

/// Norm-softmax loss on class labels, with gradients for the fusion
/// projections followed by the head weight.
pub fn supervised_objective(
    model: &GrappaModel,
    fusion: &[FusionLayer],
    head: &NormSoftmaxHead,
    input: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Vec<Array2<f64>>, Array2<f64>, Vec<Array2<f64>>)> {
    let mut g = Graph::new();
    let vars: Vec<FusionLayerVars> = fusion
        .iter()
        .map(|f| FusionLayerVars {
            query: g.param(f.query.clone()),
            key: g.param(f.key.clone()),
        })
        .collect();
    let w = g.param(head.weight.clone());
    let x = g.constant(input.clone());
    let (z, alphas) = model.forward_with(&mut g, x, labels.len(), &vars)?;
    let loss = norm_softmax_loss_graph(&mut g, z, w, head.gamma, labels)?;
    let grads = g.backward(loss);
    let dim = model.backbone.config.dim;
    let mut out = Vec::new();
    for v in &vars {
        out.push(grads.get_or_zeros(v.query, (dim, dim)));
        out.push(grads.get_or_zeros(v.key, (dim, dim)));
    }
    out.push(grads.get_or_zeros(w, head.weight.dim()));
    Ok((
        g.scalar(loss),
        out,
        g.value(z).clone(),
        alphas.iter().map(|&a| g.value(a).clone()).collect(),
    ))
}

/// Class rows start at the normalized class means of the initial features;
/// classes without images get a random row.
fn class_mean_head(
    model: &GrappaModel,
    images: &[Image],
    labels: &[usize],
    k: usize,
    gamma: f64,
    chunk: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NormSoftmaxHead> {
    let dim = model.backbone.config.dim;
    let mut head = NormSoftmaxHead::init(k, dim, gamma, rng);
    let feats = extract_features(model, images, chunk)?;
    let mut sums = Array2::<f64>::zeros((k, dim));
    for (row, &y) in feats.rows().into_iter().zip(labels) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            let mut s = sums.row_mut(y);
            s.scaled_add(1.0 / n, &row);
        }
    }
    for (c, s) in sums.rows().into_iter().enumerate() {
        let n = s.dot(&s).sqrt();
        if n > 0.0 {
            head.weight.row_mut(c).assign(&(&s / n));
        }
    }
    Ok(head)
}

/// Trains the fusion projections through a cosine classifier on labels.
pub fn train_fusion_supervised(
    mut model: GrappaModel,
    images: &[Image],
    labels: &[usize],
    config: &FusionTrainConfig,
    seed: u64,
) -> Result<FusionTraining> {
    check_frozen(&model)?;
    if labels.len() != images.len() || images.is_empty() {
        return Err(GrappaError::Shape(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    let sup = &config.supervised;
    if sup.batch_size == 0 {
        return Err(GrappaError::Config("batch_size must be positive".into()));
    }
    model.mode = FusionMode::Attention;
    model.provenance.variant = "supervised".into();
    model.provenance.seed = seed;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.backbone.config.dim;
    let mut head = class_mean_head(&model, images, labels, k, sup.gamma, config.feature_chunk, &mut rng)?;
    let mut shapes = vec![(dim, dim); 2 * model.fusion.len()];
    shapes.push(head.weight.dim());
    let mut opt = Adam::new(sup.optimizer.clone(), &shapes);
    let input = prepare_input(images, &model.backbone.config)?;
    let per_image = model.backbone.config.num_patches();

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::with_capacity(sup.epochs);
    for epoch in 0..sup.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct, mut entropy, mut steps) = (0.0, 0usize, 0.0, 0usize);
        for (step, idx) in order.chunks(sup.batch_size).enumerate() {
            let batch_input = crate::adaptors::gather_tokens(&input, idx, per_image);
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, grads, z, alphas) =
                supervised_objective(&model, &model.fusion, &head, &batch_input, &batch_labels)?;
            if !loss.is_finite() || !all_finite(&grads) {
                return Err(GrappaError::Diverged { epoch, step });
            }
            correct += predict(&z, &head)
                .iter()
                .zip(&batch_labels)
                .filter(|(p, y)| p == y)
                .count();
            let mut params: Vec<&mut Array2<f64>> = Vec::new();
            for f in &mut model.fusion {
                params.push(&mut f.query);
                params.push(&mut f.key);
            }
            params.push(&mut head.weight);
            opt.step(params, &grads);
            total += loss * idx.len() as f64;
            entropy += mean_entropy(&alphas);
            steps += 1;
        }
        log.push(FusionEpochLog {
            epoch,
            loss: total / images.len() as f64,
            attention_entropy: entropy / steps.max(1) as f64,
            accuracy: Some(correct as f64 / images.len() as f64),
        });
    }
    model.provenance.loss_history = log.iter().map(|l| l.loss).collect();
    model.provenance.entropy_history = log.iter().map(|l| l.attention_entropy).collect();
    Ok(FusionTraining { model, log })
}

/// Names of every tensor the consistency objective updates.
pub fn trainable_registry(model: &GrappaModel, config: &FusionTrainConfig) -> Vec<String> {
    let dim = model.backbone.config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = FusionTrainables {
        fusion: model.fusion.clone(),
        projector: Projector::init(dim, dim * config.barlow.projector_multiplier, 0.0, &mut rng),
    };
    t.named_params().into_iter().map(|(n, _)| n).collect()
}
