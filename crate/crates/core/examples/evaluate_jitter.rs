//! Scores perturbed copies of the ground truth to show how AP at each IoU
//! threshold and size bucket responds to localisation error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saccade::data::{Dataset, DatasetConfig, Split};
use saccade::decoder::Detection;
use saccade::evaluator::{evaluate, BoxChoice};

fn main() -> saccade::Result<()> {
    let data = Dataset::generate(
        &DatasetConfig {
            val_images: 50,
            ..DatasetConfig::default()
        },
        Split::Val,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    println!("jitter(px)  AP@50   AP@70   AP@90   mAP");
    for jitter in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let dets: Vec<Vec<Detection>> = data
            .labels
            .iter()
            .map(|boxes| {
                boxes
                    .iter()
                    .map(|b| {
                        let mut a = b.as_array();
                        for v in &mut a {
                            *v += rng.random_range(-1.0..=1.0) * jitter;
                        }
                        Detection {
                            class_id: b.class_id,
                            score: rng.random(),
                            coarse_box: a,
                            refined_box: None,
                        }
                    })
                    .collect()
            })
            .collect();
        let r = evaluate(&dets, &data.labels, BoxChoice::Coarse);
        let ap = |t| r.ap_at(t).unwrap_or(f64::NAN);
        println!("{jitter:>10.1}  {:.4}  {:.4}  {:.4}  {:.4}", ap(0.5), ap(0.7), ap(0.9), r.map_coco.unwrap_or(f64::NAN));
    }
    Ok(())
}
