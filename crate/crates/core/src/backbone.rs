//! Frozen Vision Transformer backbone.
//!
//! Pre-norm ViT: `h̃ = MSA(LN(h)) + h`, `h̄ = MLP(LN(h̃)) + h̃`, and the image
//! feature is the class-token row of the final LayerNorm. The per-layer
//! [`LayerHook`] is where adaptors and fusion layers plug in.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, DType};
use crate::data::Image;
use crate::error::{GrappaError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{LayerNormParams, LayerNormVars, Linear, LinearVars, Parameters};

pub const BACKBONE_KIND: &str = "backbone";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub num_layers: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub mlp_hidden_dim: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Per-channel standardization applied to `[0, 1]` pixels.
    pub pixel_mean: Vec<f64>,
    pub pixel_std: Vec<f64>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch_size: 8,
            num_layers: 4,
            dim: 64,
            num_heads: 4,
            mlp_hidden_dim: 128,
            ln_eps: 1e-6,
            init_std: 0.02,
            pixel_mean: vec![0.485, 0.456, 0.406],
            pixel_std: vec![0.229, 0.224, 0.225],
        }
    }
}

impl BackboneConfig {
    /// ViT-S/16 geometry.
    pub fn vit_small_16() -> Self {
        Self {
            image_height: 224,
            image_width: 224,
            patch_size: 16,
            num_layers: 12,
            dim: 384,
            num_heads: 6,
            mlp_hidden_dim: 1536,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return Err(GrappaError::Shape(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(GrappaError::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(GrappaError::Config("num_layers must be >= 1".into()));
        }
        if self.pixel_mean.len() != self.channels || self.pixel_std.len() != self.channels {
            return Err(GrappaError::Config(format!(
                "pixel normalization needs {} channel constants",
                self.channels
            )));
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return Err(GrappaError::Config("pixel_std must be positive".into()));
        }
        Ok(())
    }

    /// `T = H·W / P²`.
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub patch_embed: Linear,
    pub cls_token: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_ln: LayerNormParams,
    frozen: bool,
}

impl Parameters for BackboneParams {
    fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        self.patch_embed.named("patch_embed", &mut out);
        out.push(("cls_token".to_string(), &self.cls_token));
        out.push(("pos_embed".to_string(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            b.ln1.named(&format!("blocks.{i}.ln1"), &mut out);
            b.qkv.named(&format!("blocks.{i}.qkv"), &mut out);
            b.proj.named(&format!("blocks.{i}.proj"), &mut out);
            b.ln2.named(&format!("blocks.{i}.ln2"), &mut out);
            b.fc1.named(&format!("blocks.{i}.fc1"), &mut out);
            b.fc2.named(&format!("blocks.{i}.fc2"), &mut out);
        }
        self.final_ln.named("final_ln", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        assert!(!self.frozen, "backbone parameters are frozen");
        let mut out = Vec::new();
        self.patch_embed.collect_mut(&mut out);
        out.push(&mut self.cls_token);
        out.push(&mut self.pos_embed);
        for b in &mut self.blocks {
            b.ln1.collect_mut(&mut out);
            b.qkv.collect_mut(&mut out);
            b.proj.collect_mut(&mut out);
            b.ln2.collect_mut(&mut out);
            b.fc1.collect_mut(&mut out);
            b.fc2.collect_mut(&mut out);
        }
        self.final_ln.collect_mut(&mut out);
        out
    }
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackboneSource {
    Checkpoint { path: PathBuf },
    RandomInit { seed: u64 },
}

impl BackboneParams {
    /// Truncated-normal init (std from config) for all projections, zero
    /// biases, identity LayerNorms.
    pub fn random_init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let std = config.init_std;
        let patch_embed = Linear::trunc_normal(config.patch_dim(), d, std, &mut rng);
        let cls_token = crate::nn::trunc_normal(1, d, std, &mut rng);
        let pos_embed = crate::nn::trunc_normal(config.tokens(), d, std, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| BlockParams {
                ln1: LayerNormParams::identity(d),
                qkv: Linear::trunc_normal(d, 3 * d, std, &mut rng),
                proj: Linear::trunc_normal(d, d, std, &mut rng),
                ln2: LayerNormParams::identity(d),
                fc1: Linear::trunc_normal(d, config.mlp_hidden_dim, std, &mut rng),
                fc2: Linear::trunc_normal(config.mlp_hidden_dim, d, std, &mut rng),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            final_ln: LayerNormParams::identity(d),
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable access for tests and hand-built toy models; fails once frozen.
    pub fn unfrozen_mut(&mut self) -> Result<&mut Self> {
        if self.frozen {
            Err(GrappaError::Config("backbone is frozen".into()))
        } else {
            Ok(self)
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.config });
        let mut ck = Checkpoint::new(BACKBONE_KIND, meta);
        for (name, p) in self.named_params() {
            let exact_f32 = p.iter().all(|&v| f64::from(v as f32).to_bits() == v.to_bits());
            let dtype = if exact_f32 { DType::F32 } else { DType::F64 };
            ck.push_float(name, dtype, p.clone());
        }
        ck
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        self.to_checkpoint().save(stem)
    }

    /// Loads a checkpoint and checks every tensor against `config`.
    pub fn load(stem: &Path, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let ck = Checkpoint::load(stem)?;
        if ck.kind != BACKBONE_KIND {
            return Err(GrappaError::Checkpoint(format!(
                "expected a backbone checkpoint, found `{}`",
                ck.kind
            )));
        }
        // Shapes come from the caller's config, so a mismatched manifest fails
        // on the first tensor whose geometry disagrees.
        let mut params = Self::random_init(config, 0)?;
        let names: Vec<(String, (usize, usize))> = params
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.dim()))
            .collect();
        for ((name, shape), slot) in names.into_iter().zip(params.params_mut()) {
            *slot = ck.float(&name, shape)?;
        }
        Ok(params)
    }
}

/// Loads or initializes a backbone and sets its frozen flag.
pub fn load_or_init_backbone(source: &BackboneSource, config: &BackboneConfig) -> Result<BackboneParams> {
    let mut params = match source {
        BackboneSource::Checkpoint { path } => BackboneParams::load(path, config)?,
        BackboneSource::RandomInit { seed } => BackboneParams::random_init(config, *seed)?,
    };
    params.freeze();
    Ok(params)
}

/// Splits images into row-major `P×P` patches, each flattened as
/// `(row, col, channel)`: output `(batch, T, P²·C)`.
pub fn patchify(images: &[Image], config: &BackboneConfig) -> Result<Array3<f64>> {
    config.validate()?;
    let p = config.patch_size;
    let gw = config.image_width / p;
    let t = config.num_patches();
    let mut out = Array3::zeros((images.len(), t, config.patch_dim()));
    for (b, img) in images.iter().enumerate() {
        check_image(img, config)?;
        for py in 0..config.image_height / p {
            for px in 0..gw {
                let patch = py * gw + px;
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..config.channels {
                            out[[b, patch, k]] = f64::from(img.get(py * p + y, px * p + x, c));
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Array3<f64>, config: &BackboneConfig) -> Result<Vec<Image>> {
    config.validate()?;
    let (batch, t, pd) = patches.dim();
    if t != config.num_patches() || pd != config.patch_dim() {
        return Err(GrappaError::Shape(format!(
            "patch tensor ({batch}, {t}, {pd}) does not match config ({}, {})",
            config.num_patches(),
            config.patch_dim()
        )));
    }
    let p = config.patch_size;
    let gw = config.image_width / p;
    let mut images = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut img = Image::zeros(config.image_height, config.image_width, config.channels);
        for patch in 0..t {
            let (py, px) = (patch / gw, patch % gw);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for c in 0..config.channels {
                        img.set(py * p + y, px * p + x, c, patches[[b, patch, k]] as f32);
                        k += 1;
                    }
                }
            }
        }
        images.push(img);
    }
    Ok(images)
}

fn check_image(img: &Image, config: &BackboneConfig) -> Result<()> {
    if img.height != config.image_height
        || img.width != config.image_width
        || img.channels != config.channels
    {
        return Err(GrappaError::Shape(format!(
            "image {}x{}x{} does not match config {}x{}x{}",
            img.height,
            img.width,
            img.channels,
            config.image_height,
            config.image_width,
            config.channels
        )));
    }
    Ok(())
}

/// Normalized, flattened model input `(batch * T, P²·C)`.
pub fn prepare_input(images: &[Image], config: &BackboneConfig) -> Result<Array2<f64>> {
    let patches = patchify(images, config)?;
    let (b, t, pd) = patches.dim();
    let mut flat = patches
        .into_shape_with_order((b * t, pd))
        .map_err(|e| GrappaError::Shape(e.to_string()))?;
    let c = config.channels;
    for mut row in flat.rows_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            let ch = k % c;
            *v = (*v - config.pixel_mean[ch]) / config.pixel_std[ch];
        }
    }
    Ok(flat)
}

pub struct BlockVars {
    pub ln1: LayerNormVars,
    pub qkv: LinearVars,
    pub proj: LinearVars,
    pub ln2: LayerNormVars,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

/// Backbone parameters bound into a graph as constants.
pub struct BackboneVars {
    pub patch_embed: LinearVars,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_ln: LayerNormVars,
    pub num_heads: usize,
}

impl BackboneParams {
    pub fn bind(&self, g: &mut Graph) -> BackboneVars {
        let eps = self.config.ln_eps;
        BackboneVars {
            patch_embed: self.patch_embed.bind(g, false),
            cls_token: g.constant(self.cls_token.clone()),
            pos_embed: g.constant(self.pos_embed.clone()),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    ln1: b.ln1.bind(g, eps),
                    qkv: b.qkv.bind(g, false),
                    proj: b.proj.bind(g, false),
                    ln2: b.ln2.bind(g, eps),
                    fc1: b.fc1.bind(g, false),
                    fc2: b.fc2.bind(g, false),
                })
                .collect(),
            final_ln: self.final_ln.bind(g, eps),
            num_heads: self.config.num_heads,
        }
    }
}

/// Intermediate tensors of one ViT layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutputs {
    /// `h̃ = MSA(LN(h_prev)) + h_prev`.
    pub attn_residual: Var,
    /// `y = MLP(LN(h̃))`.
    pub mlp_out: Var,
    /// `h̄ = y + h̃`.
    pub output: Var,
}

pub fn vit_layer_forward(
    g: &mut Graph,
    block: &BlockVars,
    h_prev: Var,
    batch: usize,
    num_heads: usize,
) -> LayerOutputs {
    let x = block.ln1.forward(g, h_prev);
    let qkv = block.qkv.forward(g, x);
    let attn = g.attention(qkv, batch, num_heads);
    let msa = block.proj.forward(g, attn);
    let attn_residual = g.add(msa, h_prev);
    let x = block.ln2.forward(g, attn_residual);
    let hidden = block.fc1.forward(g, x);
    let hidden = g.gelu(hidden);
    let mlp_out = block.fc2.forward(g, hidden);
    let output = g.add(mlp_out, attn_residual);
    LayerOutputs {
        attn_residual,
        mlp_out,
        output,
    }
}

/// Called after every ViT layer; returns the tensor fed to the next layer.
pub trait LayerHook {
    fn after_layer(
        &mut self,
        g: &mut Graph,
        layer: usize,
        outputs: &LayerOutputs,
        batch: usize,
        tokens: usize,
    ) -> Result<Var>;
}

/// The plain backbone: `h^l = h̄^l`.
pub struct NoAdaptation;

impl LayerHook for NoAdaptation {
    fn after_layer(
        &mut self,
        _g: &mut Graph,
        _layer: usize,
        outputs: &LayerOutputs,
        _batch: usize,
        _tokens: usize,
    ) -> Result<Var> {
        Ok(outputs.output)
    }
}

fn ensure_finite(g: &Graph, v: Var, layer: usize, what: &str) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GrappaError::NonFinite {
            layer,
            what: what.to_string(),
        })
    }
}

/// Runs the full model on a `(batch * T, P²C)` input and returns the
/// class-token features `(batch, D)`.
pub fn forward_features<H: LayerHook>(
    g: &mut Graph,
    bv: &BackboneVars,
    input: Var,
    batch: usize,
    hook: &mut H,
) -> Result<Var> {
    ensure_finite(g, input, 0, "input")?;
    let projected = bv.patch_embed.forward(g, input);
    let mut h = g.embed_tokens(projected, bv.cls_token, bv.pos_embed, batch);
    let tokens = g.shape(h).0 / batch;
    for (l, block) in bv.blocks.iter().enumerate() {
        let outs = vit_layer_forward(g, block, h, batch, bv.num_heads);
        ensure_finite(g, outs.output, l + 1, "block output")?;
        h = hook.after_layer(g, l, &outs, batch, tokens)?;
        ensure_finite(g, h, l + 1, "adapted output")?;
    }
    let normed = bv.final_ln.forward(g, h);
    Ok(g.select_rows(normed, (0..batch).map(|b| b * tokens).collect()))
}

/// A model that maps images to features through a graph.
pub trait FeatureModel: Sync {
    fn backbone(&self) -> &BackboneParams;

    /// Builds the forward pass on `input` (already prepared patches).
    fn forward(&self, g: &mut Graph, input: Var, batch: usize) -> Result<Var>;
}

impl FeatureModel for BackboneParams {
    fn backbone(&self) -> &BackboneParams {
        self
    }

    fn forward(&self, g: &mut Graph, input: Var, batch: usize) -> Result<Var> {
        let bv = self.bind(g);
        forward_features(g, &bv, input, batch, &mut NoAdaptation)
    }
}

/// `z = LN(h^L)[class]` for every image, computed in independent chunks.
pub fn extract_features<M: FeatureModel + ?Sized>(
    model: &M,
    images: &[Image],
    chunk: usize,
) -> Result<Array2<f64>> {
    let config = &model.backbone().config;
    let dim = config.dim;
    let chunk = chunk.max(1);
    let parts: Vec<Result<Array2<f64>>> = images
        .par_chunks(chunk)
        .map(|imgs| {
            let input = prepare_input(imgs, config)?;
            let mut g = Graph::new();
            let x = g.constant(input);
            let z = model.forward(&mut g, x, imgs.len())?;
            Ok(g.value(z).clone())
        })
        .collect();
    let mut out = Array2::zeros((images.len(), dim));
    let mut row = 0;
    for part in parts {
        let part = part?;
        let n = part.nrows();
        out.slice_mut(ndarray::s![row..row + n, ..]).assign(&part);
        row += n;
    }
    Ok(out)
}
