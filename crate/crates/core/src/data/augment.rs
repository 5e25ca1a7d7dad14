use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;

/// Random crop-resize, horizontal flip and brightness/contrast jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Area fraction range of the crop.
    pub crop_area: (f64, f64),
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_area: (0.5, 1.0),
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            crop_area: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

pub fn augment(image: &Image, policy: &AugmentPolicy, seed: u64) -> Image {
    augment_with(image, policy, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn augment_with<R: Rng>(image: &Image, policy: &AugmentPolicy, rng: &mut R) -> Image {
    let (h, w) = (image.height as f64, image.width as f64);
    let (lo, hi) = policy.crop_area;
    let area = if hi > lo { rng.random_range(lo..=hi) } else { hi };
    let side = area.clamp(0.0, 1.0).sqrt();
    let (ch, cw) = (h * side, w * side);
    let y0 = if h > ch { rng.random_range(0.0..=h - ch) } else { 0.0 };
    let x0 = if w > cw { rng.random_range(0.0..=w - cw) } else { 0.0 };
    let flip = policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob.min(1.0));
    let jitter = |r: &mut R, amount: f64| if amount > 0.0 { r.random_range(-amount..=amount) } else { 0.0 };
    let brightness = jitter(rng, policy.brightness);
    let contrast = 1.0 + jitter(rng, policy.contrast);

    if area >= 1.0 && !flip && brightness == 0.0 && contrast == 1.0 {
        return image.clone();
    }
    let mut out = Image::zeros(image.height, image.width, image.channels);
    let sy = ch / h;
    let sx = cw / w;
    for c in 0..image.channels {
        let mean = (0..image.height)
            .flat_map(|y| (0..image.width).map(move |x| (y, x)))
            .map(|(y, x)| image.get(y, x, c) as f64)
            .sum::<f64>()
            / (h * w);
        for y in 0..image.height {
            for x in 0..image.width {
                let xo = if flip { image.width - 1 - x } else { x };
                let src_y = y0 + (y as f64 + 0.5) * sy;
                let src_x = x0 + (xo as f64 + 0.5) * sx;
                let v = image.sample_bilinear(src_y as f32, src_x as f32, c) as f64;
                let v = (v - mean) * contrast + mean + brightness;
                out.set(y, x, c, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::new(8, 6, 3, (0..8 * 6 * 3).map(|i| i as f32 / 144.0).collect()).unwrap()
    }

    #[test]
    fn identity_policy_is_noop() {
        let img = ramp();
        assert_eq!(augment(&img, &AugmentPolicy::identity(), 3), img);
    }

    #[test]
    fn seeded_and_size_preserving() {
        let img = ramp();
        let p = AugmentPolicy::default();
        let a = augment(&img, &p, 9);
        assert_eq!(a, augment(&img, &p, 9));
        assert_eq!((a.height, a.width, a.channels), (8, 6, 3));
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pure_flip_mirrors_columns() {
        let img = ramp();
        let p = AugmentPolicy {
            flip_prob: 1.0,
            ..AugmentPolicy::identity()
        };
        let a = augment(&img, &p, 0);
        for y in 0..8 {
            for x in 0..6 {
                assert!((a.get(y, x, 1) - img.get(y, 5 - x, 1)).abs() < 1e-6);
            }
        }
    }
}
