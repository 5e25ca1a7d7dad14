#![allow(dead_code)]

use std::path::PathBuf;

use grappa::adaptors::{AdaptorConfig, AdaptorSet};
use grappa::backbone::{BackboneConfig, BackboneParams};
use grappa::data::Image;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8x8 RGB, 4x4 patches, two layers of width 8.
pub fn toy_config() -> BackboneConfig {
    BackboneConfig {
        image_height: 8,
        image_width: 8,
        channels: 3,
        patch_size: 4,
        num_layers: 2,
        dim: 8,
        num_heads: 2,
        mlp_hidden_dim: 16,
        init_std: 0.3,
        ..BackboneConfig::default()
    }
}

pub fn toy_backbone(seed: u64) -> BackboneParams {
    let mut b = BackboneParams::random_init(&toy_config(), seed).unwrap();
    b.freeze();
    b
}

/// Adaptor sets with a random up-projection so the branches are non-trivial.
pub fn toy_adaptors(backbone: &BackboneParams, n: usize, seed: u64) -> Vec<AdaptorSet> {
    let config = AdaptorConfig {
        zero_init_up: false,
        init_std: 0.3,
        ..AdaptorConfig::default()
    };
    (0..n)
        .map(|i| AdaptorSet::init(i, backbone, &config, seed + i as u64).unwrap())
        .collect()
}

pub fn random_images(n: usize, config: &BackboneConfig, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = config.image_height * config.image_width * config.channels;
            let pixels = (0..len).map(|_| rng.random::<f32>()).collect();
            Image::new(config.image_height, config.image_width, config.channels, pixels).unwrap()
        })
        .collect()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn max_rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let scale = a.iter().chain(b.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}
