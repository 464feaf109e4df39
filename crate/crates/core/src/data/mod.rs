//! Datasets: synthetic generation, file ingestion, semi-supervised splits,
//! cropping and augmentation.

mod augment;
pub mod io;
mod split;
mod synthetic;

pub use augment::{augment, crop_at, random_crop, Augmentation};
pub use io::{load_split, load_test, Manifest, ManifestEntry};
pub use split::{split_dataset, split_indices, DatasetSplit, LabeledCase, UnlabeledCase};
pub use synthetic::{generate_synthetic, generate_synthetic_with, SyntheticStyle, FOREGROUND_RANGE};
