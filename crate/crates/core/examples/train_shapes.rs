//! Trains the detector on in-memory synthetic shapes and reports AP on the
//! validation split.
//!
//! ```text
//! cargo run --release --example train_shapes -- [train_images] [epochs]
//! ```
//!
//! With the defaults (500 images, 30 epochs) this takes a couple of minutes
//! on one core.

use saccade::data::{Dataset, DatasetConfig, Split};
use saccade::decoder::DecoderConfig;
use saccade::evaluator::BoxChoice;
use saccade::network::NetworkConfig;
use saccade::trainer::{evaluate_dataset, save_checkpoint, train, TrainConfig};

fn main() -> saccade::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);

    let data = DatasetConfig {
        num_images: n,
        ..DatasetConfig::default()
    };
    let train_set = Dataset::generate(&data, Split::Train)?;
    let val_set = Dataset::generate(&data, Split::Val)?;
    let net = NetworkConfig::default();
    let cfg = TrainConfig {
        epochs,
        lr_drop_epoch: epochs * 5 / 6,
        ..TrainConfig::desk_profile()
    };

    let t = std::time::Instant::now();
    let outcome = train(&train_set, None, &net, &cfg)?;
    let losses = &outcome.checkpoint.loss_history;
    println!(
        "{} steps in {:.1}s, loss {:.3} -> {:.3}",
        losses.len(),
        t.elapsed().as_secs_f64(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );

    let report = evaluate_dataset(&outcome.checkpoint.params, &net, &val_set, &DecoderConfig::default(), BoxChoice::Refined)?;
    println!("{}", report.table());
    save_checkpoint(&outcome.checkpoint, std::path::Path::new("target/train_shapes.ckpt"))?;
    Ok(())
}
