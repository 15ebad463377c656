//! The three keypoint placements used by the refinement head, and one
//! refinement pass of an untrained network with each.

use saccade::autodiff::Tensor;
use saccade::network::{aggregate_refine, compute_keypoints, infer, KeypointMode, ModelParams, NetworkConfig};

fn main() -> saccade::Result<()> {
    let modes = [
        KeypointMode::Corners,
        KeypointMode::DiagPts { t: 0.25 },
        KeypointMode::MidEdgePts { t: 0.5 },
    ];
    let (center, w, h) = ((8.0, 8.0), 6.0, 4.0);
    for mode in modes {
        let pts = compute_keypoints(center, w, h, mode);
        let fmt: Vec<String> = pts.iter().map(|(x, y)| format!("({x:.2}, {y:.2})")).collect();
        println!("{mode:?}: {}", fmt.join(" "));
    }

    let image = Tensor::from_fn3([3, 64, 64], |c, y, x| ((x * 7 + y * 3 + c * 11) % 17) as f64 / 16.0);
    for mode in modes {
        let net = NetworkConfig {
            keypoints: mode,
            ..NetworkConfig::default()
        };
        let params = ModelParams::init(&net)?;
        let out = infer(&image, &params, &net)?;
        let r = aggregate_refine(&out.backbone_features, &[center], &[(w, h)], &params, &net)?;
        println!("{mode:?}: residual ({:+.4}, {:+.4})", r.residuals[0].0, r.residuals[0].1);
    }
    Ok(())
}
