//! Network outputs to ranked detections.

use serde::{Deserialize, Serialize};

use crate::autodiff::{maxpool3x3_same, Tensor};
use crate::encoder::GroundTruthTarget;
use crate::error::{Error, Result};
use crate::evaluator::iou;
use crate::network::{aggregate_refine_n, ModelParams, NetworkConfig, NetworkOutputs};

/// `[x_min, y_min, x_max, y_max]` in input-image pixels.
pub type BoxXyxy = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub coarse_box: BoxXyxy,
    pub refined_box: Option<BoxXyxy>,
}

impl Detection {
    /// The refined box when present, otherwise the coarse box.
    pub fn best_box(&self) -> BoxXyxy {
        self.refined_box.unwrap_or(self.coarse_box)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NmsMode {
    PeakPicking,
    Iou { threshold: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub top_k: usize,
    pub score_threshold: f64,
    pub nms_mode: NmsMode,
    pub use_refinement: bool,
    pub refine_iterations: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            top_k: 100,
            score_threshold: 0.0,
            nms_mode: NmsMode::PeakPicking,
            use_refinement: true,
            refine_iterations: 1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config {
                field: "top_k".into(),
                reason: "must be at least 1".into(),
            });
        }
        if let NmsMode::Iou { threshold } = self.nms_mode {
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(Error::Config {
                    field: "nms_mode.threshold".into(),
                    reason: format!("{threshold} not in (0, 1)"),
                });
            }
        }
        Ok(())
    }
}

/// Keeps a cell iff it equals the max of its 3x3 neighbourhood; all others
/// become 0. Tied neighbours all survive.
pub fn peak_nms(heatmap: &Tensor) -> Tensor {
    let mut data = maxpool3x3_same(heatmap).into_data();
    for (m, &v) in data.iter_mut().zip(heatmap.data()) {
        *m = if v == *m { v } else { 0.0 };
    }
    Tensor::new(heatmap.shape().to_vec(), data).expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub class_id: usize,
    /// `(col, row)`.
    pub cell: (usize, usize),
    pub score: f64,
}

/// The `k` highest non-zero cells, score descending, ties broken by
/// `(class, row, col)` ascending.
pub fn topk_peaks(heatmap: &Tensor, k: usize) -> Vec<Peak> {
    let (_, h, w) = heatmap.dims3().expect("heatmap is [C, H, W]");
    let mut idx: Vec<usize> = (0..heatmap.len()).filter(|&i| heatmap.data()[i] != 0.0).collect();
    let data = heatmap.data();
    // Flat index order is (class, row, col) order.
    let cmp = |a: &usize, b: &usize| data[*b].total_cmp(&data[*a]).then(a.cmp(b));
    if idx.len() > k {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx.into_iter()
        .map(|i| Peak {
            class_id: i / (h * w),
            cell: (i % w, (i / w) % h),
            score: data[i],
        })
        .collect()
}

/// Greedy per-class suppression over detections sorted by score: a
/// detection survives iff its IoU with every kept same-class detection is
/// below `threshold`.
pub fn iou_nms(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for d in detections {
        let b = d.best_box();
        if kept
            .iter()
            .filter(|k| k.class_id == d.class_id)
            .all(|k| iou(&k.best_box(), &b) < threshold)
        {
            kept.push(d.clone());
        }
    }
    kept
}

fn clip_box(b: [f64; 4], width: f64, height: f64) -> [f64; 4] {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

/// Center-size box in feature units to clipped image-pixel corners.
fn to_image_box(center: (f64, f64), wh: (f64, f64), stride: f64, width: f64, height: f64) -> [f64; 4] {
    let (w, h) = (wh.0.max(0.0), wh.1.max(0.0));
    clip_box(
        [
            (center.0 - w / 2.0) * stride,
            (center.1 - h / 2.0) * stride,
            (center.0 + w / 2.0) * stride,
            (center.1 + h / 2.0) * stride,
        ],
        width,
        height,
    )
}

/// Decodes one image. Refinement needs `params`; with `None` (or
/// `use_refinement = false`) the refined box is absent.
pub fn decode(
    outputs: &NetworkOutputs,
    params: Option<&ModelParams>,
    config: &DecoderConfig,
    net: &NetworkConfig,
) -> Result<Vec<Detection>> {
    config.validate()?;
    let (c, h, w) = outputs.center_heatmap.dims3()?;
    if c != net.num_classes || h != net.feature_height() || w != net.feature_width() {
        return Err(Error::shape(
            "decode",
            format!(
                "center heatmap {c}x{h}x{w} does not match config {}x{}x{}",
                net.num_classes,
                net.feature_height(),
                net.feature_width()
            ),
        ));
    }
    for (name, t) in [("wh_map", &outputs.wh_map), ("offset_map", &outputs.offset_map)] {
        if t.shape() != [2, h, w] {
            return Err(Error::shape("decode", format!("{name} has shape {:?}", t.shape())));
        }
    }
    let candidates = match config.nms_mode {
        NmsMode::PeakPicking => topk_peaks(&peak_nms(&outputs.center_heatmap), config.top_k),
        NmsMode::Iou { .. } => topk_peaks(&outputs.center_heatmap, config.top_k),
    };
    let peaks: Vec<Peak> = candidates
        .into_iter()
        .filter(|p| p.score > config.score_threshold)
        .collect();

    let centers: Vec<(f64, f64)> = peaks
        .iter()
        .map(|p| {
            let (x, y) = p.cell;
            (
                x as f64 + outputs.offset_map.at3(0, y, x),
                y as f64 + outputs.offset_map.at3(1, y, x),
            )
        })
        .collect();
    let coarse_wh: Vec<(f64, f64)> = peaks
        .iter()
        .map(|p| (outputs.wh_map.at3(0, p.cell.1, p.cell.0), outputs.wh_map.at3(1, p.cell.1, p.cell.0)))
        .collect();

    let refined_wh = match params {
        Some(params) if config.use_refinement && net.aggregation => Some(
            aggregate_refine_n(
                &outputs.backbone_features,
                &centers,
                &coarse_wh,
                params,
                net,
                config.refine_iterations,
            )?
            .refined_wh,
        ),
        _ => None,
    };

    let stride = net.output_stride as f64;
    let (img_w, img_h) = (net.input_width as f64, net.input_height as f64);
    let mut detections: Vec<Detection> = peaks
        .iter()
        .enumerate()
        .map(|(i, p)| Detection {
            class_id: p.class_id,
            score: p.score,
            coarse_box: to_image_box(centers[i], coarse_wh[i], stride, img_w, img_h),
            refined_box: refined_wh
                .as_ref()
                .map(|r| to_image_box(centers[i], r[i], stride, img_w, img_h)),
        })
        .collect();

    if let NmsMode::Iou { threshold } = config.nms_mode {
        detections = iou_nms(&detections, threshold);
    }
    Ok(detections)
}

/// Idealised network outputs read straight from encoded ground truth: the
/// target heatmap, size and offset maps. Decoding these must reproduce the
/// encoded boxes.
pub fn outputs_from_targets(target: &GroundTruthTarget) -> NetworkOutputs {
    let (_, h, w) = target.center_heatmap.dims3().expect("heatmap is [C, H, W]");
    NetworkOutputs {
        center_heatmap: target.center_heatmap.clone(),
        wh_map: target.wh_target.clone(),
        offset_map: target.offset_target.clone(),
        corner_heatmap: Some(target.corner_heatmap.clone()),
        backbone_features: Tensor::zeros(&[1, h, w]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_map_keeps_global_max() {
        let t = Tensor::from_fn3([1, 6, 7], |_, y, x| (y * 7 + x) as f64);
        let s = peak_nms(&t);
        let survivors: Vec<_> = s.data().iter().filter(|&&v| v != 0.0).collect();
        assert_eq!(survivors, vec![&41.0]);
    }

    #[test]
    fn constant_map_all_survive() {
        let t = Tensor::full(&[2, 4, 4], 0.3);
        assert_eq!(peak_nms(&t), t);
    }

    #[test]
    fn topk_single_and_short() {
        let mut t = Tensor::zeros(&[2, 4, 4]);
        t.set3(1, 2, 3, 0.7);
        let p = topk_peaks(&t, 100);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].class_id, 1);
        assert_eq!(p[0].cell, (3, 2));
        t.set3(0, 0, 0, 0.7);
        let p = topk_peaks(&t, 100);
        assert_eq!(p.len(), 2);
        // tie broken by class ascending
        assert_eq!(p[0].class_id, 0);
    }

    fn det(class_id: usize, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            class_id,
            score,
            coarse_box: b,
            refined_box: None,
        }
    }

    #[test]
    fn iou_nms_per_class() {
        let b = [0.0, 0.0, 10.0, 10.0];
        assert_eq!(iou_nms(&[det(0, 0.9, b), det(0, 0.8, b)], 0.5).len(), 1);
        assert_eq!(iou_nms(&[det(0, 0.9, b), det(1, 0.8, b)], 0.5).len(), 2);
    }
}
