//! Deterministic synthetic shapes dataset, augmentation, and on-disk format.

mod augment;
mod image;
mod io;
mod shapes;

pub use augment::{augment, hflip, scale_about_center, AugmentConfig};
pub use image::RgbImage;
pub use io::{
    dataset_checksum, read_dataset, read_manifest, read_ppm, sha256_hex, write_dataset, write_ppm, write_split, Dataset,
    DatasetManifest, SplitSummary, LABELS_FILE, MANIFEST_FILE,
};
pub use shapes::{generate_scene, generate_split, DatasetConfig, Scene, ShapeClass, Split};
