//! Ground-truth boxes to supervision maps.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::{compute_keypoints, NetworkConfig};

/// Minimum IoU that any box placed within the Gaussian radius must keep.
pub const GAUSSIAN_MIN_IOU: f64 = 0.3;

/// Ground-truth box in input-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl GtBox {
    pub fn new(class_id: usize, x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            class_id,
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Intersection with `[0, width] x [0, height]`, or `None` if empty.
    pub fn clipped(&self, width: f64, height: f64) -> Option<GtBox> {
        let b = GtBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
            ..*self
        };
        (b.x_max > b.x_min && b.y_max > b.y_min).then_some(b)
    }
}

/// One encoded object, in feature-map units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodedObject {
    pub class_id: usize,
    /// `(col, row)` of the center cell.
    pub cell: (usize, usize),
    /// Exact center.
    pub center: (f64, f64),
    pub wh: (f64, f64),
}

/// Per-image supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTarget {
    pub center_heatmap: Tensor,
    pub corner_heatmap: Tensor,
    pub wh_target: Tensor,
    pub offset_target: Tensor,
    /// Row-major `[h_f, w_f]`.
    pub keypoint_mask: Vec<bool>,
    pub objects: Vec<EncodedObject>,
    /// Boxes lying entirely outside the image.
    pub skipped: usize,
    /// Objects whose center cell was already taken by an earlier object.
    pub collisions: usize,
}

impl GroundTruthTarget {
    pub fn mask_count(&self) -> usize {
        self.keypoint_mask.iter().filter(|&&m| m).count()
    }
}

/// Largest keypoint displacement (in the units of `w`, `h`) that keeps
/// IoU >= `min_iou` with the original box. Minimum over the three
/// two-corner cases: both corners inward, both outward, and both shifted
/// the same way (a translation).
pub fn gaussian_radius(w: f64, h: f64, min_iou: f64) -> Result<f64> {
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::InvalidArgument(format!("box size must be positive, got {w}x{h}")));
    }
    if !(min_iou > 0.0 && min_iou < 1.0) {
        return Err(Error::InvalidArgument(format!("min_iou {min_iou} not in (0, 1)")));
    }
    let t = min_iou;
    let s = w + h;
    let area = w * h;
    // (w - 2r)(h - 2r) = t*w*h
    let inward = (2.0 * s - (4.0 * s * s - 16.0 * (1.0 - t) * area).max(0.0).sqrt()) / 8.0;
    // w*h = t*(w + 2r)(h + 2r)
    let outward = (-2.0 * t * s + (4.0 * t * t * s * s + 16.0 * t * (1.0 - t) * area).sqrt()) / (8.0 * t);
    // (w - r)(h - r) = 2t*w*h / (1 + t)
    let shifted = (s - (s * s - 4.0 * area * (1.0 - t) / (1.0 + t)).max(0.0).sqrt()) / 2.0;
    Ok(inward.min(outward).min(shifted).max(0.0))
}

/// Splats `exp(-d^2 / (2 sigma^2))` around `center` (col, row) into one
/// channel, combining with existing values by elementwise max. The window
/// is truncated at `ceil(3 sigma)` cells.
pub fn render_gaussian(map: &mut Tensor, channel: usize, center: (usize, usize), sigma: f64) {
    let (_, h, w) = map.dims3().expect("heatmap is [C, H, W]");
    let (cx, cy) = center;
    if !(sigma > 0.0) {
        map.set3(channel, cy, cx, 1.0_f64.max(map.at3(channel, cy, cx)));
        return;
    }
    let reach = (3.0 * sigma).ceil() as usize;
    let denom = 2.0 * sigma * sigma;
    for y in cy.saturating_sub(reach)..=(cy + reach).min(h - 1) {
        for x in cx.saturating_sub(reach)..=(cx + reach).min(w - 1) {
            let dx = x as f64 - cx as f64;
            let dy = y as f64 - cy as f64;
            let v = (-(dx * dx + dy * dy) / denom).exp();
            if v > map.at3(channel, y, x) {
                map.set3(channel, y, x, v);
            }
        }
    }
}

fn cell_of(v: f64, limit: usize) -> usize {
    (v.floor().max(0.0) as usize).min(limit - 1)
}

pub fn encode_targets(boxes: &[GtBox], config: &NetworkConfig) -> Result<GroundTruthTarget> {
    config.validate()?;
    let (hf, wf) = (config.feature_height(), config.feature_width());
    let r = config.output_stride as f64;
    let mut target = GroundTruthTarget {
        center_heatmap: Tensor::zeros(&[config.num_classes, hf, wf]),
        corner_heatmap: Tensor::zeros(&[4, hf, wf]),
        wh_target: Tensor::zeros(&[2, hf, wf]),
        offset_target: Tensor::zeros(&[2, hf, wf]),
        keypoint_mask: vec![false; hf * wf],
        objects: Vec::with_capacity(boxes.len()),
        skipped: 0,
        collisions: 0,
    };
    for b in boxes {
        if b.class_id >= config.num_classes {
            return Err(Error::InvalidArgument(format!(
                "box class {} out of range for {} classes",
                b.class_id, config.num_classes
            )));
        }
        if !(b.x_max > b.x_min && b.y_max > b.y_min) {
            return Err(Error::InvalidArgument(format!("degenerate box {b:?}")));
        }
        let Some(b) = b.clipped(config.input_width as f64, config.input_height as f64) else {
            target.skipped += 1;
            continue;
        };
        let (cx, cy) = b.center();
        let center = (cx / r, cy / r);
        let wh = (b.width() / r, b.height() / r);
        let cell = (cell_of(center.0, wf), cell_of(center.1, hf));
        let radius = gaussian_radius(wh.0, wh.1, GAUSSIAN_MIN_IOU)?;
        let sigma = radius / 3.0;

        render_gaussian(&mut target.center_heatmap, b.class_id, cell, sigma);
        for (ch, p) in compute_keypoints(center, wh.0, wh.1, config.keypoints).iter().enumerate() {
            render_gaussian(&mut target.corner_heatmap, ch, (cell_of(p.0, wf), cell_of(p.1, hf)), sigma);
        }

        let flat = cell.1 * wf + cell.0;
        let obj = EncodedObject {
            class_id: b.class_id,
            cell,
            center,
            wh,
        };
        if target.keypoint_mask[flat] {
            target.collisions += 1;
            target.objects.retain(|o| o.cell != cell);
        }
        target.keypoint_mask[flat] = true;
        target.wh_target.set3(0, cell.1, cell.0, wh.0);
        target.wh_target.set3(1, cell.1, cell.0, wh.1);
        target.offset_target.set3(0, cell.1, cell.0, center.0 - cell.0 as f64);
        target.offset_target.set3(1, cell.1, cell.0, center.1 - cell.1 as f64);
        target.objects.push(obj);
    }
    Ok(target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            num_classes: 3,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn radius_vanishes_as_iou_requirement_tightens() {
        for &(w, h) in &[(1.0, 1.0), (10.0, 3.0), (40.0, 40.0)] {
            let r = gaussian_radius(w, h, 1.0 - 1e-12).unwrap();
            assert!(r < 1e-5, "{w}x{h}: {r}");
        }
    }

    #[test]
    fn radius_rejects_bad_input() {
        assert!(gaussian_radius(0.0, 3.0, 0.3).is_err());
        assert!(gaussian_radius(3.0, -1.0, 0.3).is_err());
        assert!(gaussian_radius(3.0, 3.0, 1.0).is_err());
    }

    #[test]
    fn gaussian_peak_and_tail() {
        let mut m = Tensor::zeros(&[1, 21, 21]);
        let r = 6.0;
        render_gaussian(&mut m, 0, (10, 10), r / 3.0);
        assert_eq!(m.at3(0, 10, 10), 1.0);
        let at_r = m.at3(0, 10, 16);
        assert!((at_r - (-4.5f64).exp()).abs() < 1e-15);
        assert!((at_r - 0.011109).abs() < 1e-5);
        // outside the ceil(3 sigma) window nothing is written
        assert_eq!(m.at3(0, 10, 17), 0.0);
    }

    #[test]
    fn exact_division_box() {
        let t = encode_targets(&[GtBox::new(1, 8.0, 8.0, 24.0, 24.0)], &cfg()).unwrap();
        assert_eq!(t.objects[0].cell, (4, 4));
        assert_eq!(t.offset_target.at3(0, 4, 4), 0.0);
        assert_eq!(t.offset_target.at3(1, 4, 4), 0.0);
        assert_eq!(t.wh_target.at3(0, 4, 4), 4.0);
        assert_eq!(t.wh_target.at3(1, 4, 4), 4.0);
        assert_eq!(t.center_heatmap.at3(1, 4, 4), 1.0);
        assert!(t.keypoint_mask[4 * 16 + 4]);
        assert_eq!(t.mask_count(), 1);
    }

    #[test]
    fn fractional_center() {
        let t = encode_targets(&[GtBox::new(0, 6.0, 6.0, 14.0, 14.0)], &cfg()).unwrap();
        assert_eq!(t.objects[0].cell, (2, 2));
        assert_eq!(t.offset_target.at3(0, 2, 2), 0.5);
        assert_eq!(t.offset_target.at3(1, 2, 2), 0.5);
    }

    #[test]
    fn empty_box_list() {
        let t = encode_targets(&[], &cfg()).unwrap();
        assert!(t.center_heatmap.data().iter().all(|&v| v == 0.0));
        assert!(t.corner_heatmap.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.mask_count(), 0);
        assert!(t.objects.is_empty());
    }

    #[test]
    fn outside_box_is_skipped() {
        let t = encode_targets(&[GtBox::new(0, 70.0, 70.0, 80.0, 80.0)], &cfg()).unwrap();
        assert_eq!(t.skipped, 1);
        assert!(t.objects.is_empty());
    }

    #[test]
    fn colliding_centers_keep_the_later_object() {
        let boxes = [GtBox::new(0, 8.0, 8.0, 24.0, 24.0), GtBox::new(2, 9.0, 9.0, 23.0, 23.0)];
        let t = encode_targets(&boxes, &cfg()).unwrap();
        assert_eq!(t.collisions, 1);
        assert_eq!(t.objects.len(), 1);
        assert_eq!(t.objects[0].class_id, 2);
        assert_eq!(t.wh_target.at3(0, 4, 4), 3.5);
    }

    #[test]
    fn corner_channels_follow_keypoints() {
        let t = encode_targets(&[GtBox::new(0, 8.0, 12.0, 40.0, 36.0)], &cfg()).unwrap();
        // center (6, 6), wh (8, 6) -> corners (2,3) (10,3) (2,9) (10,9)
        for (ch, (x, y)) in [(2, 3), (10, 3), (2, 9), (10, 9)].into_iter().enumerate() {
            assert_eq!(t.corner_heatmap.at3(ch, y, x), 1.0, "channel {ch}");
        }
    }
}
