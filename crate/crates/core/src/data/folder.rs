//! Image-folder datasets laid out as `root/<task>/<class>/<image>`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{GrappaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One split of one task. Labels index into `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: String,
    pub split: Split,
    pub class_names: Vec<String>,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub test: TaskDataset,
}

impl TaskSplits {
    pub fn name(&self) -> &str {
        &self.train.task
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub task: String,
    pub train_classes: usize,
    pub train_images: usize,
    pub test_classes: usize,
    pub test_images: usize,
}

/// Per-task class and image counts plus totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tasks: Vec<TaskCounts>,
    pub train_classes: usize,
    pub train_images: usize,
    pub test_classes: usize,
    pub test_images: usize,
}

impl DatasetManifest {
    pub fn from_counts(tasks: Vec<TaskCounts>) -> Self {
        let sum = |f: fn(&TaskCounts) -> usize| tasks.iter().map(f).sum();
        Self {
            train_classes: sum(|t| t.train_classes),
            train_images: sum(|t| t.train_images),
            test_classes: sum(|t| t.test_classes),
            test_images: sum(|t| t.test_images),
            tasks,
        }
    }

    pub fn from_tasks(tasks: &[TaskSplits]) -> Self {
        Self::from_counts(
            tasks
                .iter()
                .map(|t| TaskCounts {
                    task: t.name().to_string(),
                    train_classes: t.train.num_classes(),
                    train_images: t.train.len(),
                    test_classes: t.test.num_classes(),
                    test_images: t.test.len(),
                })
                .collect(),
        )
    }

    /// Fixed-width table, one row per task and a total row.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<20} {:>10} {:>10} {:>10} {:>10}\n",
            "task", "tr_cls", "tr_img", "te_cls", "te_img"
        );
        for t in &self.tasks {
            out += &format!(
                "{:<20} {:>10} {:>10} {:>10} {:>10}\n",
                t.task, t.train_classes, t.train_images, t.test_classes, t.test_images
            );
        }
        out += &format!(
            "{:<20} {:>10} {:>10} {:>10} {:>10}\n",
            "total", self.train_classes, self.train_images, self.test_classes, self.test_images
        );
        out
    }
}

/// Number of classes that go to the training split: the first `⌊n/2⌋`.
pub fn train_class_count(n: usize) -> usize {
    n / 2
}

/// Splits sorted class names into (train, test).
pub fn split_classes(mut names: Vec<String>) -> (Vec<String>, Vec<String>) {
    names.sort();
    let test = names.split_off(train_class_count(names.len()));
    (names, test)
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| GrappaError::io(dir, e))? {
        let entry = entry.map_err(|e| GrappaError::io(dir, e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Decodes an image, resizes its shorter side to the target and takes the
/// central crop. Pixels are scaled to `[0, 1]`.
pub fn load_image(path: &Path, height: usize, width: usize, channels: usize) -> Result<Image> {
    let decoded = image::open(path)?;
    let (w0, h0) = (decoded.width() as f64, decoded.height() as f64);
    let scale = (width as f64 / w0).max(height as f64 / h0);
    let rw = ((w0 * scale).round() as u32).max(width as u32);
    let rh = ((h0 * scale).round() as u32).max(height as u32);
    let resized = decoded.resize_exact(rw, rh, FilterType::Triangle);
    let x0 = (rw - width as u32) / 2;
    let y0 = (rh - height as u32) / 2;
    let cropped = resized.crop_imm(x0, y0, width as u32, height as u32);
    let pixels: Vec<f32> = match channels {
        1 => cropped.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        3 => cropped.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        c => return Err(GrappaError::Config(format!("unsupported channel count {c}"))),
    };
    Image::new(height, width, channels, pixels)
}

fn load_classes(
    task: &str,
    split: Split,
    dirs: &[PathBuf],
    size: (usize, usize, usize),
) -> Result<TaskDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in dirs.iter().enumerate() {
        let files = sorted_entries(dir, false)?;
        if files.is_empty() {
            return Err(GrappaError::Data(format!("class directory {} is empty", dir.display())));
        }
        for f in files {
            images.push(load_image(&f, size.0, size.1, size.2)?);
            labels.push(label);
        }
    }
    Ok(TaskDataset {
        task: task.to_string(),
        split,
        class_names: dirs.iter().map(|d| file_name(d)).collect(),
        images,
        labels,
    })
}

/// Loads every task under `root`, assigning the alphabetically first half of
/// each task's classes to training.
pub fn load_image_folder(
    root: &Path,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Vec<TaskSplits>> {
    let task_dirs = sorted_entries(root, true)?;
    if task_dirs.is_empty() {
        return Err(GrappaError::Data(format!("no task directories under {}", root.display())));
    }
    let mut out = Vec::with_capacity(task_dirs.len());
    for task_dir in task_dirs {
        let task = file_name(&task_dir);
        let class_dirs = sorted_entries(&task_dir, true)?;
        if class_dirs.len() < 2 {
            return Err(GrappaError::Data(format!(
                "task `{task}` needs at least two classes, found {}",
                class_dirs.len()
            )));
        }
        let n_train = train_class_count(class_dirs.len());
        let size = (height, width, channels);
        out.push(TaskSplits {
            train: load_classes(&task, Split::Train, &class_dirs[..n_train], size)?,
            test: load_classes(&task, Split::Test, &class_dirs[n_train..], size)?,
        });
    }
    Ok(out)
}

/// Writes tasks back out in folder layout as PNG files.
pub fn save_image_folder(root: &Path, tasks: &[TaskSplits]) -> Result<()> {
    for t in tasks {
        for split in [&t.train, &t.test] {
            for (i, (img, &label)) in split.images.iter().zip(&split.labels).enumerate() {
                let dir = root.join(&split.task).join(&split.class_names[label]);
                fs::create_dir_all(&dir).map_err(|e| GrappaError::io(&dir, e))?;
                let path = dir.join(format!("{i:05}.png"));
                let bytes: Vec<u8> = img
                    .pixels
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect();
                let color = if img.channels == 1 {
                    image::ExtendedColorType::L8
                } else {
                    image::ExtendedColorType::Rgb8
                };
                image::save_buffer(&path, &bytes, img.width as u32, img.height as u32, color)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_and_odd_class_splits() {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let (tr, te) = split_classes(names(&["d", "b", "a", "c"]));
        assert_eq!(tr, names(&["a", "b"]));
        assert_eq!(te, names(&["c", "d"]));
        let (tr, te) = split_classes(names(&["e", "a", "c", "b", "d"]));
        assert_eq!(tr.len(), 2);
        assert_eq!(te, names(&["c", "d", "e"]));
    }

    #[test]
    fn benchmark_totals_aggregate() {
        // Published per-dataset counts of the six-dataset benchmark.
        let rows = [
            ("aircraft", 50, 5_000, 50, 5_000),
            ("cars", 98, 8_054, 98, 8_131),
            ("cub", 100, 5_864, 100, 5_924),
            ("flowers", 51, 3_870, 51, 4_319),
            ("food", 51, 51_000, 50, 50_000),
            ("products", 11_318, 59_551, 11_316, 60_502),
        ];
        let m = DatasetManifest::from_counts(
            rows.iter()
                .map(|&(task, a, b, c, d)| TaskCounts {
                    task: task.into(),
                    train_classes: a,
                    train_images: b,
                    test_classes: c,
                    test_images: d,
                })
                .collect(),
        );
        assert_eq!(m.train_images, 133_339);
        assert_eq!(m.test_images, 133_876);
        assert_eq!(m.train_classes, 11_668);
        assert_eq!(m.test_classes, 11_665);
    }

    #[test]
    fn folder_round_trip_and_empty_class() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for (class, shade) in [("b", 0.8f32), ("a", 0.2), ("c", 0.5)] {
            let d = root.join("task0").join(class);
            fs::create_dir_all(&d).unwrap();
            for i in 0..2 {
                let px = vec![(shade * 255.0) as u8; 8 * 6 * 3];
                image::save_buffer(d.join(format!("{i}.png")), &px, 8, 6, image::ExtendedColorType::Rgb8)
                    .unwrap();
            }
        }
        let tasks = load_image_folder(root, 4, 4, 3).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].train.class_names, vec!["a"]);
        assert_eq!(tasks[0].test.class_names, vec!["b", "c"]);
        assert_eq!(tasks[0].test.labels, vec![0, 0, 1, 1]);
        let img = &tasks[0].train.images[0];
        assert_eq!((img.height, img.width, img.channels), (4, 4, 3));
        assert!((img.get(1, 1, 0) - 51.0 / 255.0).abs() < 1e-6);

        fs::create_dir_all(root.join("task0").join("d")).unwrap();
        assert!(matches!(load_image_folder(root, 4, 4, 3), Err(GrappaError::Data(_))));
    }

    proptest::proptest! {
        #[test]
        fn class_split_is_a_disjoint_partition(names in proptest::collection::hash_set("[a-z]{1,6}", 1..30)) {
            let names: Vec<String> = names.into_iter().collect();
            let (train, test) = split_classes(names.clone());
            proptest::prop_assert_eq!(train.len() + test.len(), names.len());
            proptest::prop_assert!(train.iter().all(|c| !test.contains(c)));
            proptest::prop_assert_eq!(train.len(), train_class_count(names.len()));
            proptest::prop_assert!(test.len() - train.len() <= 1);
            proptest::prop_assert!(train.iter().chain(&test).all(|c| names.contains(c)));
        }
    }
}
