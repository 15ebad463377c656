//! Trains briefly, then decodes the validation split with 0..=3 refinement
//! iterations to show how box quality changes at strict IoU thresholds.
//! Pass a checkpoint path to skip training.

use saccade::data::{Dataset, DatasetConfig, Split};
use saccade::decoder::DecoderConfig;
use saccade::evaluator::BoxChoice;
use saccade::trainer::{evaluate_dataset, load_checkpoint, train, TrainConfig};

fn main() -> saccade::Result<()> {
    let data = DatasetConfig::default();
    let val_set = Dataset::generate(&data, Split::Val)?;
    let ck = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path.as_ref())?,
        None => {
            let small = DatasetConfig {
                num_images: 200,
                ..data.clone()
            };
            let cfg = TrainConfig {
                epochs: 20,
                lr_drop_epoch: 16,
                ..TrainConfig::desk_profile()
            };
            train(&Dataset::generate(&small, Split::Train)?, None, &Default::default(), &cfg)?.checkpoint
        }
    };

    println!("iters   AP@50   AP@70   AP@90");
    for it in 0..=3 {
        let decoder = DecoderConfig {
            refine_iterations: it,
            use_refinement: it > 0,
            ..DecoderConfig::default()
        };
        let r = evaluate_dataset(&ck.params, &ck.net_config, &val_set, &decoder, BoxChoice::Refined)?;
        let ap = |t| r.ap_at(t).unwrap_or(f64::NAN);
        println!("{it:>5}  {:.4}  {:.4}  {:.4}", ap(0.5), ap(0.7), ap(0.9));
    }
    Ok(())
}
