//! Encodes a generated scene into training targets, decodes the targets
//! back into boxes and scores them against the original labels.

use saccade::data::{generate_scene, DatasetConfig};
use saccade::decoder::{decode, outputs_from_targets, DecoderConfig};
use saccade::encoder::{encode_targets, gaussian_radius, GAUSSIAN_MIN_IOU};
use saccade::evaluator::{evaluate, iou, BoxChoice};
use saccade::network::NetworkConfig;

fn main() -> saccade::Result<()> {
    let data = DatasetConfig::default();
    let net = NetworkConfig::default();
    let scene = generate_scene(&data, 7);

    let target = encode_targets(&scene.boxes, &net)?;
    println!(
        "{} objects -> {} positive cells, {} collisions",
        scene.boxes.len(),
        target.mask_count(),
        target.collisions
    );
    for o in &target.objects {
        let r = gaussian_radius(o.wh.0, o.wh.1, GAUSSIAN_MIN_IOU)?;
        println!("  class {} cell {:?} wh ({:.2}, {:.2}) radius {r:.2}", o.class_id, o.cell, o.wh.0, o.wh.1);
    }

    let dets = decode(&outputs_from_targets(&target), None, &DecoderConfig::default(), &net)?;
    for gt in &scene.boxes {
        let best = dets
            .iter()
            .filter(|d| d.class_id == gt.class_id)
            .map(|d| iou(&d.coarse_box, &gt.as_array()))
            .fold(0.0, f64::max);
        println!("  gt {:?} best IoU {best:.4}", gt.as_array().map(|v| (v * 10.0).round() / 10.0));
    }

    let report = evaluate(&[dets], &[scene.boxes], BoxChoice::Coarse);
    println!("{}", report.table());
    Ok(())
}
