//! Query-key attention over parallel adaptor outputs.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptors::{AdaptorLayerVars, AdaptorSet};
use crate::backbone::{forward_features, BackboneParams, FeatureModel, LayerHook, LayerOutputs};
use crate::checkpoint::{Checkpoint, DType};
use crate::error::{GrappaError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{trunc_normal, Parameters};
use sha2::{Digest, Sha256};

pub const FUSION_KIND: &str = "fusion";

/// Tolerance of the per-image attention normalization check.
pub const ATTENTION_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionOptions {
    /// Divide attention logits by `sqrt(D)`.
    pub scale_by_sqrt_dim: bool,
    /// Include the class token when mean-pooling tokens for attention.
    pub pool_class_token: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            scale_by_sqrt_dim: true,
            pool_class_token: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Learned query-key attention.
    Attention,
    /// Fixed uniform weights.
    Average,
}

/// Query and key projections of one layer, stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
}

impl FusionLayer {
    pub fn zeros(dim: usize) -> Self {
        Self {
            query: Array2::zeros((dim, dim)),
            key: Array2::zeros((dim, dim)),
        }
    }

    /// Random query, zero key: logits start at zero, so the initial weights
    /// are uniform while both projections receive gradient.
    pub fn init(dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            query: trunc_normal(dim, dim, std, rng),
            key: Array2::zeros((dim, dim)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionLayerVars {
    pub query: Var,
    pub key: Var,
}

/// Mean-pools per-image tokens, optionally skipping the class token (row 0).
fn pool_tokens(g: &mut Graph, x: Var, batch: usize, tokens: usize, with_class: bool) -> Var {
    if with_class {
        g.group_mean(x, tokens)
    } else {
        let rows: Vec<usize> = (0..batch)
            .flat_map(|b| (b * tokens + 1)..((b + 1) * tokens))
            .collect();
        let patches = g.select_rows(x, rows);
        g.group_mean(patches, tokens - 1)
    }
}

fn check_attention(g: &Graph, alpha: Var, layer: usize) -> Result<()> {
    for row in g.value(alpha).rows() {
        let sum: f64 = row.sum();
        if row.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || (sum - 1.0).abs() > ATTENTION_SUM_TOL {
            return Err(GrappaError::NonFinite {
                layer: layer + 1,
                what: format!("attention weights {row}"),
            });
        }
    }
    Ok(())
}

/// Per-image weights `(batch, N)` over the stacked adaptor outputs.
pub fn fusion_attention_graph(
    g: &mut Graph,
    h_bar: Var,
    stack: &[Var],
    layer: FusionLayerVars,
    batch: usize,
    tokens: usize,
    options: &FusionOptions,
) -> Var {
    let dim = g.shape(h_bar).1;
    let pooled = pool_tokens(g, h_bar, batch, tokens, options.pool_class_token);
    let q = g.matmul(pooled, layer.query);
    let keys: Vec<Var> = stack
        .iter()
        .map(|&u| {
            let pu = pool_tokens(g, u, batch, tokens, options.pool_class_token);
            g.matmul(pu, layer.key)
        })
        .collect();
    let mut logits = g.row_dots(q, &keys);
    if options.scale_by_sqrt_dim {
        logits = g.scale(logits, 1.0 / (dim as f64).sqrt());
    }
    g.softmax_rows(logits)
}

/// `Σ_i α_i U_i + h̃`, broadcasting each image's weights over its tokens.
pub fn fuse_graph(g: &mut Graph, alpha: Var, stack: &[Var], attn_residual: Var, tokens: usize) -> Var {
    let mixed = g.mix_groups(alpha, stack, tokens);
    g.add(mixed, attn_residual)
}

/// Plain-array version of the attention, for a single layer.
pub fn fusion_attention(
    h_bar: &Array2<f64>,
    stack: &[Array2<f64>],
    layer: &FusionLayer,
    batch: usize,
    options: &FusionOptions,
) -> Result<Array2<f64>> {
    let tokens = validate_stack(h_bar, stack, batch)?;
    let mut g = Graph::new();
    let h = g.constant(h_bar.clone());
    let us: Vec<Var> = stack.iter().map(|u| g.constant(u.clone())).collect();
    let vars = FusionLayerVars {
        query: g.constant(layer.query.clone()),
        key: g.constant(layer.key.clone()),
    };
    let alpha = fusion_attention_graph(&mut g, h, &us, vars, batch, tokens, options);
    check_attention(&g, alpha, 0)?;
    Ok(g.value(alpha).clone())
}

fn validate_stack(h_bar: &Array2<f64>, stack: &[Array2<f64>], batch: usize) -> Result<usize> {
    if stack.is_empty() {
        return Err(GrappaError::Shape("adaptor stack is empty".into()));
    }
    if batch == 0 || h_bar.nrows() % batch != 0 {
        return Err(GrappaError::Shape(format!(
            "{} token rows do not split into {batch} images",
            h_bar.nrows()
        )));
    }
    if let Some(u) = stack.iter().find(|u| u.dim() != h_bar.dim()) {
        return Err(GrappaError::Shape(format!(
            "stack entry {:?} vs layer output {:?}",
            u.dim(),
            h_bar.dim()
        )));
    }
    Ok(h_bar.nrows() / batch)
}

/// Builds `U_i = A_i(h̄) + y` from the branch outputs `A_i(h̄)`.
pub fn adaptor_stack(branches: &[Array2<f64>], mlp_out: &Array2<f64>) -> Vec<Array2<f64>> {
    branches.iter().map(|a| a + mlp_out).collect()
}

/// Fused layer output `Σ_i α_i U_i + h̃` on plain arrays.
pub fn fuse_layer(
    attn_residual: &Array2<f64>,
    h_bar: &Array2<f64>,
    stack: &[Array2<f64>],
    layer: &FusionLayer,
    batch: usize,
    options: &FusionOptions,
) -> Result<Array2<f64>> {
    let alpha = fusion_attention(h_bar, stack, layer, batch, options)?;
    mix_with(&alpha, attn_residual, stack, batch)
}

/// Fused layer output with uniform weights.
pub fn avg_fuse_layer(
    attn_residual: &Array2<f64>,
    h_bar: &Array2<f64>,
    stack: &[Array2<f64>],
    batch: usize,
) -> Result<Array2<f64>> {
    validate_stack(h_bar, stack, batch)?;
    let alpha = Array2::from_elem((batch, stack.len()), 1.0 / stack.len() as f64);
    mix_with(&alpha, attn_residual, stack, batch)
}

fn mix_with(
    alpha: &Array2<f64>,
    attn_residual: &Array2<f64>,
    stack: &[Array2<f64>],
    batch: usize,
) -> Result<Array2<f64>> {
    let tokens = validate_stack(attn_residual, stack, batch)?;
    let mut g = Graph::new();
    let a = g.constant(alpha.clone());
    let us: Vec<Var> = stack.iter().map(|u| g.constant(u.clone())).collect();
    let r = g.constant(attn_residual.clone());
    let out = fuse_graph(&mut g, a, &us, r, tokens);
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionProvenance {
    pub variant: String,
    pub seed: u64,
    pub adaptor_granularities: Vec<usize>,
    pub adaptor_fingerprints: Vec<String>,
    pub backbone_fingerprint: String,
    pub loss_history: Vec<f64>,
    pub entropy_history: Vec<f64>,
}

/// Frozen backbone, N frozen adaptor sets and per-layer fusion.
#[derive(Debug, Clone)]
pub struct GrappaModel {
    pub backbone: BackboneParams,
    pub adaptors: Vec<AdaptorSet>,
    pub fusion: Vec<FusionLayer>,
    pub mode: FusionMode,
    pub options: FusionOptions,
    pub provenance: FusionProvenance,
}

pub(crate) fn fusion_named(layers: &[FusionLayer]) -> Vec<(String, &Array2<f64>)> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(l, f)| {
            [
                (format!("fusion.{l}.query"), &f.query),
                (format!("fusion.{l}.key"), &f.key),
            ]
        })
        .collect()
}

impl GrappaModel {
    /// Fusion with random queries and zero keys (uniform weights at start).
    pub fn new(
        backbone: BackboneParams,
        adaptors: Vec<AdaptorSet>,
        mode: FusionMode,
        options: FusionOptions,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if adaptors.is_empty() {
            return Err(GrappaError::Config("fusion needs at least one adaptor set".into()));
        }
        for a in &adaptors {
            a.check_compatible(&backbone)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = backbone.config.dim;
        let fusion = (0..backbone.config.num_layers)
            .map(|_| FusionLayer::init(dim, init_std, &mut rng))
            .collect();
        let provenance = FusionProvenance {
            seed,
            adaptor_granularities: adaptors.iter().map(|a| a.granularity).collect(),
            adaptor_fingerprints: adaptors.iter().map(|a| a.fingerprint()).collect(),
            backbone_fingerprint: backbone.fingerprint(),
            ..FusionProvenance::default()
        };
        Ok(Self {
            backbone,
            adaptors,
            fusion,
            mode,
            options,
            provenance,
        })
    }

    /// Replaces every key projection with a truncated-normal draw; `std = 0`
    /// restores zero keys.
    pub fn init_keys(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.backbone.config.dim;
        for f in &mut self.fusion {
            f.key = if std > 0.0 {
                trunc_normal(dim, dim, std, &mut rng)
            } else {
                Array2::zeros((dim, dim))
            };
        }
    }

    pub fn num_adaptors(&self) -> usize {
        self.adaptors.len()
    }

    /// SHA-256 over backbone and adaptor parameters.
    pub fn frozen_fingerprint(&self) -> String {
        let mut parts = vec![self.backbone.fingerprint()];
        parts.extend(self.adaptors.iter().map(|a| a.fingerprint()));
        hex::encode(Sha256::digest(parts.join(":").as_bytes()))
    }

    /// Binds the fusion projections, as trainable leaves or constants.
    pub fn bind_fusion(&self, g: &mut Graph, trainable: bool) -> Vec<FusionLayerVars> {
        self.fusion
            .iter()
            .map(|f| {
                let (query, key) = if trainable {
                    (g.param(f.query.clone()), g.param(f.key.clone()))
                } else {
                    (g.constant(f.query.clone()), g.constant(f.key.clone()))
                };
                FusionLayerVars { query, key }
            })
            .collect()
    }

    /// Builds the full forward pass and returns the features and the
    /// per-layer attention weights.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        input: Var,
        batch: usize,
        fusion: &[FusionLayerVars],
    ) -> Result<(Var, Vec<Var>)> {
        let bv = self.backbone.bind(g);
        let adaptors: Vec<Vec<AdaptorLayerVars>> = self.adaptors.iter().map(|a| a.bind(g, false)).collect();
        let mut hook = FusionHook {
            adaptors: &adaptors,
            fusion,
            mode: self.mode,
            options: &self.options,
            alphas: Vec::new(),
        };
        let z = forward_features(g, &bv, input, batch, &mut hook)?;
        Ok((z, hook.alphas))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "mode": self.mode,
            "options": self.options,
            "num_layers": self.fusion.len(),
            "dim": self.backbone.config.dim,
            "provenance": self.provenance,
        });
        let mut ck = Checkpoint::new(FUSION_KIND, meta);
        for (name, p) in fusion_named(&self.fusion) {
            ck.push_float(name, DType::F64, p.clone());
        }
        ck.save(stem)
    }

    /// Loads fusion weights and attaches them to the given frozen parts.
    pub fn load(stem: &Path, backbone: BackboneParams, adaptors: Vec<AdaptorSet>) -> Result<Self> {
        let ck = Checkpoint::load(stem)?;
        if ck.kind != FUSION_KIND {
            return Err(GrappaError::Checkpoint(format!("expected fusion, found `{}`", ck.kind)));
        }
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| GrappaError::Checkpoint(format!("fusion meta missing `{k}`")))
        };
        let mode: FusionMode = serde_json::from_value(field("mode")?)?;
        let options: FusionOptions = serde_json::from_value(field("options")?)?;
        let provenance: FusionProvenance = serde_json::from_value(field("provenance")?)?;
        let mut model = Self::new(backbone, adaptors, mode, options, 0.02, provenance.seed)?;
        let found: Vec<usize> = model.adaptors.iter().map(|a| a.granularity).collect();
        if found != provenance.adaptor_granularities {
            return Err(GrappaError::Checkpoint(format!(
                "fusion was trained on adaptor sets {:?}, got {:?}",
                provenance.adaptor_granularities, found
            )));
        }
        let dim = model.backbone.config.dim;
        for (l, layer) in model.fusion.iter_mut().enumerate() {
            layer.query = ck.float(&format!("fusion.{l}.query"), (dim, dim))?;
            layer.key = ck.float(&format!("fusion.{l}.key"), (dim, dim))?;
        }
        model.provenance = provenance;
        Ok(model)
    }
}

impl FeatureModel for GrappaModel {
    fn backbone(&self) -> &BackboneParams {
        &self.backbone
    }

    fn forward(&self, g: &mut Graph, input: Var, batch: usize) -> Result<Var> {
        let fusion = self.bind_fusion(g, false);
        Ok(self.forward_with(g, input, batch, &fusion)?.0)
    }
}

/// Per-layer attention weights `(batch, N)` of a plain forward pass.
pub fn attention_weights(model: &GrappaModel, input: &Array2<f64>, batch: usize) -> Result<Vec<Array2<f64>>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let fusion = model.bind_fusion(&mut g, false);
    let (_, alphas) = model.forward_with(&mut g, x, batch, &fusion)?;
    Ok(alphas.iter().map(|&a| g.value(a).clone()).collect())
}

struct FusionHook<'a> {
    adaptors: &'a [Vec<AdaptorLayerVars>],
    fusion: &'a [FusionLayerVars],
    mode: FusionMode,
    options: &'a FusionOptions,
    alphas: Vec<Var>,
}

impl LayerHook for FusionHook<'_> {
    fn after_layer(
        &mut self,
        g: &mut Graph,
        layer: usize,
        outputs: &LayerOutputs,
        batch: usize,
        tokens: usize,
    ) -> Result<Var> {
        let stack: Vec<Var> = self
            .adaptors
            .iter()
            .map(|set| {
                let branch = set[layer].branch(g, outputs.output);
                g.add(branch, outputs.mlp_out)
            })
            .collect();
        let alpha = match self.mode {
            FusionMode::Attention => fusion_attention_graph(
                g,
                outputs.output,
                &stack,
                self.fusion[layer],
                batch,
                tokens,
                self.options,
            ),
            FusionMode::Average => {
                g.constant(Array2::from_elem((batch, stack.len()), 1.0 / stack.len() as f64))
            }
        };
        check_attention(g, alpha, layer)?;
        self.alphas.push(alpha);
        Ok(fuse_graph(g, alpha, &stack, outputs.attn_residual, tokens))
    }
}

/// Mean Shannon entropy (nats) of the rows of each weight matrix.
pub fn mean_entropy(alphas: &[Array2<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for a in alphas {
        for row in a.rows() {
            total -= row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
