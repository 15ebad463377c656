//! Writes a small synthetic-shapes dataset to disk and an augmented copy of
//! the first training image with its boxes drawn in.
//!
//! ```text
//! cargo run --release --example generate_dataset -- out/shapes
//! ```

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saccade::data::{augment, read_dataset, write_dataset, write_ppm, AugmentConfig, DatasetConfig, RgbImage};

fn main() -> saccade::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/shapes-example".into()));
    let config = DatasetConfig {
        num_images: 32,
        val_images: 8,
        ..DatasetConfig::default()
    };
    let manifest = write_dataset(&config, &out)?;
    for s in &manifest.splits {
        println!("{:?}: {} images, {} boxes, sha256 {}", s.split, s.num_images, s.num_boxes, &s.checksum[..16]);
    }

    let train = read_dataset(&out.join("train"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (img, boxes) = augment(&train.images[0].to_tensor(), &train.labels[0], &AugmentConfig::default(), &mut rng);
    let mut img = RgbImage::from_tensor(&img);
    for b in &boxes {
        img.draw_rect(b.as_array(), [255, 255, 255]);
    }
    let path = out.join("augmented_000000.ppm");
    write_ppm(&path, &img)?;
    println!("{} boxes after augmentation, wrote {}", boxes.len(), path.display());
    Ok(())
}
