use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoder::GtBox;

/// Boxes keeping less than this fraction of their area after clipping are dropped.
const MIN_VISIBLE_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip_prob: 0.5,
            scale_range: (0.6, 1.3),
        }
    }
}

/// Mirrors the image horizontally; box x-coordinates map through `x -> W - x`.
pub fn hflip(image: &Tensor, boxes: &[GtBox]) -> (Tensor, Vec<GtBox>) {
    let (_, _, w) = image.dims3().expect("image is [3, H, W]");
    let (c, h) = (image.shape()[0], image.shape()[1]);
    let flipped = Tensor::from_fn3([c, h, w], |ci, y, x| image.at3(ci, y, w - 1 - x));
    let wf = w as f64;
    let boxes = boxes
        .iter()
        .map(|b| GtBox {
            x_min: wf - b.x_max,
            x_max: wf - b.x_min,
            ..*b
        })
        .collect();
    (flipped, boxes)
}

/// Rescales by `s` about the image center, keeping the canvas size: the
/// resized image is center-cropped (s > 1) or zero-padded (s < 1).
/// Coordinates map through `x -> s*x + (1 - s)*W/2`.
pub fn scale_about_center(image: &Tensor, boxes: &[GtBox], s: f64) -> (Tensor, Vec<GtBox>) {
    let (c, h, w) = image.dims3().expect("image is [3, H, W]");
    let (wf, hf) = (w as f64, h as f64);
    let (ox, oy) = ((1.0 - s) * wf / 2.0, (1.0 - s) * hf / 2.0);
    let out = if s == 1.0 {
        image.clone()
    } else {
        Tensor::from_fn3([c, h, w], |ci, y, x| {
            // pixel centers sit at integer + 0.5 in continuous coordinates
            let sx = (x as f64 + 0.5 - ox) / s - 0.5;
            let sy = (y as f64 + 0.5 - oy) / s - 0.5;
            if sx < -0.5 || sy < -0.5 || sx > wf - 0.5 || sy > hf - 0.5 {
                return 0.0;
            }
            let sx = sx.clamp(0.0, wf - 1.0);
            let sy = sy.clamp(0.0, hf - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            image.at3(ci, y0, x0) * (1.0 - fx) * (1.0 - fy)
                + image.at3(ci, y0, x1) * fx * (1.0 - fy)
                + image.at3(ci, y1, x0) * (1.0 - fx) * fy
                + image.at3(ci, y1, x1) * fx * fy
        })
    };
    let boxes = boxes
        .iter()
        .filter_map(|b| {
            let scaled = GtBox {
                x_min: s * b.x_min + ox,
                y_min: s * b.y_min + oy,
                x_max: s * b.x_max + ox,
                y_max: s * b.y_max + oy,
                ..*b
            };
            let clipped = scaled.clipped(wf, hf)?;
            (clipped.area() >= MIN_VISIBLE_FRACTION * scaled.area()).then_some(clipped)
        })
        .collect();
    (out, boxes)
}

/// Random flip then random scale, driven by `rng`.
pub fn augment<R: Rng>(image: &Tensor, boxes: &[GtBox], config: &AugmentConfig, rng: &mut R) -> (Tensor, Vec<GtBox>) {
    if !config.enabled {
        return (image.clone(), boxes.to_vec());
    }
    let flip = rng.random::<f64>() < config.hflip_prob;
    let (lo, hi) = config.scale_range;
    let s = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let (img, bx) = if flip {
        hflip(image, boxes)
    } else {
        (image.clone(), boxes.to_vec())
    };
    scale_about_center(&img, &bx, s)
}
