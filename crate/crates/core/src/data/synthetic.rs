//! Seeded benchmark of rendered shapes whose labels live at three nested
//! granularities: shape, shape x color, shape x color x texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::folder::{split_classes, Split, TaskDataset, TaskSplits};
use super::pool::{make_unlabeled_pool, UnlabeledPool};
use super::Image;
use crate::error::{GrappaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Coarse,
    Mid,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub name: String,
    pub level: Granularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub tasks: Vec<SyntheticTask>,
    pub shapes: usize,
    pub colors_per_shape: usize,
    pub textures_per_color: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub noise: f64,
    /// Max jitter of the shape center in pixels.
    pub position_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let task = |name: &str, level| SyntheticTask {
            name: name.into(),
            level,
        };
        Self {
            tasks: vec![
                task("coarse", Granularity::Coarse),
                task("mid", Granularity::Mid),
                task("fine", Granularity::Fine),
            ],
            shapes: 4,
            colors_per_shape: 2,
            textures_per_color: 2,
            images_per_class: 40,
            image_size: 32,
            noise: 0.05,
            position_jitter: 3.0,
            seed: 0,
        }
    }
}

/// Factor triple behind one rendered image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Factors {
    pub shape: usize,
    pub color: usize,
    pub texture: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(GrappaError::Config("synthetic spec has no tasks".into()));
        }
        if self.shapes == 0 || self.colors_per_shape == 0 || self.textures_per_color == 0 {
            return Err(GrappaError::Config("synthetic spec has zero classes".into()));
        }
        if self.images_per_class == 0 || self.image_size < 8 {
            return Err(GrappaError::Config(
                "synthetic spec needs images_per_class >= 1 and image_size >= 8".into(),
            ));
        }
        if self.shapes > SHAPES.len() {
            return Err(GrappaError::Config(format!(
                "at most {} shapes are supported",
                SHAPES.len()
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(GrappaError::Config("noise must be non-negative".into()));
        }
        for t in &self.tasks {
            if self.classes_at(t.level).len() < 2 {
                return Err(GrappaError::Config(format!(
                    "task `{}` would have fewer than two classes",
                    t.name
                )));
            }
        }
        Ok(())
    }

    /// Class name and factor groups at a granularity, in name order.
    pub fn classes_at(&self, level: Granularity) -> Vec<(String, Vec<Factors>)> {
        let mut out = Vec::new();
        for s in 0..self.shapes {
            let colors: Vec<usize> = (0..self.colors_per_shape).collect();
            match level {
                Granularity::Coarse => out.push((
                    format!("s{s:02}"),
                    self.expand(s, &colors, &(0..self.textures_per_color).collect::<Vec<_>>()),
                )),
                Granularity::Mid => {
                    for &c in &colors {
                        out.push((
                            format!("s{s:02}_c{c:02}"),
                            self.expand(s, &[c], &(0..self.textures_per_color).collect::<Vec<_>>()),
                        ));
                    }
                }
                Granularity::Fine => {
                    for &c in &colors {
                        for t in 0..self.textures_per_color {
                            out.push((format!("s{s:02}_c{c:02}_t{t:02}"), self.expand(s, &[c], &[t])));
                        }
                    }
                }
            }
        }
        out
    }

    fn expand(&self, shape: usize, colors: &[usize], textures: &[usize]) -> Vec<Factors> {
        colors
            .iter()
            .flat_map(|&color| {
                textures.iter().map(move |&texture| Factors {
                    shape,
                    color,
                    texture,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

const SHAPES: [Shape; 6] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
];

/// Membership of `(dx, dy)` (relative to center, in units of the radius).
fn inside(shape: Shape, dx: f64, dy: f64) -> bool {
    match shape {
        Shape::Disk => dx * dx + dy * dy <= 1.0,
        Shape::Square => dx.abs() <= 0.8 && dy.abs() <= 0.8,
        Shape::Triangle => dy <= 0.8 && dy >= -1.0 + 2.0 * dx.abs(),
        Shape::Cross => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
        Shape::Ring => {
            let r2 = dx * dx + dy * dy;
            (0.36..=1.0).contains(&r2)
        }
        Shape::Diamond => dx.abs() + dy.abs() <= 1.0,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Colors of one shape are variants around a shape-specific base hue.
fn color_of(spec: &SyntheticSpec, f: Factors) -> [f64; 3] {
    let base = f.shape as f64 / spec.shapes as f64;
    let offset = if spec.colors_per_shape > 1 {
        (f.color as f64 / (spec.colors_per_shape - 1) as f64 - 0.5) * 0.6 / spec.shapes as f64
    } else {
        0.0
    };
    let value = 0.95 - 0.3 * (f.color % 2) as f64;
    hsv_to_rgb(base + offset, 0.85, value)
}

/// Renders one image; nuisance factors are position, size, background level
/// and stripe phase.
pub fn render(spec: &SyntheticSpec, f: Factors, rng: &mut ChaCha8Rng) -> Image {
    let n = spec.image_size;
    let mid = (n as f64 - 1.0) / 2.0;
    let cx = mid + rng.random_range(-spec.position_jitter..=spec.position_jitter);
    let cy = mid + rng.random_range(-spec.position_jitter..=spec.position_jitter);
    let radius = n as f64 * rng.random_range(0.3..0.4);
    let background = rng.random_range(0.15..0.45);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let angle = std::f64::consts::PI * f.texture as f64 / spec.textures_per_color as f64;
    let (sa, ca) = angle.sin_cos();
    let freq = std::f64::consts::TAU / (n as f64 / 5.0);
    let color = color_of(spec, f);
    let shape = SHAPES[f.shape];
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut img = Image::zeros(n, n, 3);
    for y in 0..n {
        for x in 0..n {
            let dx = (x as f64 - cx) / radius;
            let dy = (y as f64 - cy) / radius;
            let stripe = 0.5 + 0.5 * (freq * (ca * x as f64 + sa * y as f64) + phase).sin();
            for (c, &base) in color.iter().enumerate() {
                let mut v = if inside(shape, dx, dy) {
                    base * (0.6 + 0.4 * stripe)
                } else {
                    background
                };
                if spec.noise > 0.0 {
                    v += noise.sample(rng);
                }
                img.set(y, x, c, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Labeled synthetic splits together with the label-free training pool.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub tasks: Vec<TaskSplits>,
    pub pool: UnlabeledPool,
    /// Generating factors per task and split, parallel to the images.
    pub factors: Vec<(Vec<Factors>, Vec<Factors>)>,
}

pub fn generate_synthetic_benchmark(spec: &SyntheticSpec) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    let mut tasks = Vec::with_capacity(spec.tasks.len());
    let mut factors = Vec::with_capacity(spec.tasks.len());
    for (ti, task) in spec.tasks.iter().enumerate() {
        let classes = spec.classes_at(task.level);
        let names: Vec<String> = classes.iter().map(|(n, _)| n.clone()).collect();
        let (train_names, test_names) = split_classes(names);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(ti as u64));
        let mut build = |split: Split, wanted: &[String]| {
            let mut images = Vec::new();
            let mut labels = Vec::new();
            let mut fs = Vec::new();
            for (label, name) in wanted.iter().enumerate() {
                let members = &classes.iter().find(|(n, _)| n == name).expect("known class").1;
                for i in 0..spec.images_per_class {
                    let f = members[i % members.len()];
                    images.push(render(spec, f, &mut rng));
                    labels.push(label);
                    fs.push(f);
                }
            }
            (
                TaskDataset {
                    task: task.name.clone(),
                    split,
                    class_names: wanted.to_vec(),
                    images,
                    labels,
                },
                fs,
            )
        };
        let (train, train_f) = build(Split::Train, &train_names);
        let (test, test_f) = build(Split::Test, &test_names);
        tasks.push(TaskSplits { train, test });
        factors.push((train_f, test_f));
    }
    let train_refs: Vec<&TaskDataset> = tasks.iter().map(|t| &t.train).collect();
    let pool = make_unlabeled_pool(&train_refs)?;
    Ok(SyntheticBenchmark {
        tasks,
        pool,
        factors,
    })
}
