//! Images, datasets on disk, the synthetic benchmark and augmentations.

mod augment;
mod folder;
mod image;
mod pool;
mod synthetic;

pub use augment::{augment, augment_with, AugmentPolicy};
pub use folder::{
    load_image, load_image_folder, save_image_folder, split_classes, train_class_count,
    DatasetManifest, Split, TaskCounts, TaskDataset, TaskSplits,
};
pub use image::Image;
pub use pool::{make_unlabeled_pool, UnlabeledPool};
pub use synthetic::{
    generate_synthetic_benchmark, render, Factors, Granularity, SyntheticBenchmark,
    SyntheticSpec, SyntheticTask,
};
