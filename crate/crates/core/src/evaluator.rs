//! IoU, greedy matching and 101-point interpolated average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::{BoxXyxy, Detection};
use crate::encoder::GtBox;

/// IoU thresholds reported individually.
pub const REPORT_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];
/// Upper area bounds (pixels²) of the small and medium buckets.
pub const SMALL_MAX_AREA: f64 = 64.0 * 64.0;
pub const MEDIUM_MAX_AREA: f64 = 128.0 * 128.0;

pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &BoxXyxy| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    /// Buckets partition `[0, inf)`: small `[0, 64²]`, medium `(64², 128²]`,
    /// large above.
    pub fn of_area(area: f64) -> SizeBucket {
        if area <= SMALL_MAX_AREA {
            SizeBucket::Small
        } else if area <= MEDIUM_MAX_AREA {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

fn box_area(b: &BoxXyxy) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Which box of a detection is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxChoice {
    Coarse,
    #[default]
    Refined,
}

fn pick(d: &Detection, choice: BoxChoice) -> BoxXyxy {
    match choice {
        BoxChoice::Coarse => d.coarse_box,
        BoxChoice::Refined => d.best_box(),
    }
}

/// Precision/recall points in score order, plus the interpolated curve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// Precision at recall 0.00, 0.01, ..., 1.00 (monotone non-increasing).
    pub interpolated: Vec<f64>,
}

/// Outcome of matching at one threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub curve: PrCurve,
}

/// Matches detections to ground truth across all images and computes AP.
///
/// Detections are ranked by score over the whole set (stable for ties) and
/// each takes the highest-IoU unmatched same-class box with IoU >=
/// `iou_threshold`. With a size bucket, ground truth outside it is ignored:
/// a detection matching it is dropped, as is an unmatched detection whose
/// own area falls outside the bucket. AP is `None` when no ground truth is
/// in scope.
pub fn match_and_ap(
    detections: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    iou_threshold: f64,
    bucket: Option<SizeBucket>,
    choice: BoxChoice,
) -> ApResult {
    let in_scope = |area: f64| bucket.is_none_or(|b| SizeBucket::of_area(area) == b);
    let num_gt: usize = gts.iter().flatten().filter(|g| in_scope(g.area())).count();

    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().map(move |d| (img, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut outcomes: Vec<bool> = Vec::with_capacity(ranked.len());
    for (img, d) in ranked {
        let b = pick(d, choice);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.get(img).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
            if taken[img][j] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&b, &g.as_array());
            if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                taken[img][j] = true;
                if in_scope(gts[img][j].area()) {
                    outcomes.push(true);
                }
            }
            None => {
                if in_scope(box_area(&b)) {
                    outcomes.push(false);
                }
            }
        }
    }

    if num_gt == 0 {
        return ApResult {
            ap: None,
            num_gt,
            curve: PrCurve::default(),
        };
    }
    let curve = pr_curve(&outcomes, num_gt);
    let ap = curve.interpolated.iter().sum::<f64>() / curve.interpolated.len() as f64;
    ApResult {
        ap: Some(ap),
        num_gt,
        curve,
    }
}

/// PR points from ranked true/false-positive flags, and the 101-point
/// interpolation (precision envelope sampled at recall thresholds).
pub fn pr_curve(outcomes: &[bool], num_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(outcomes.len());
    let mut precision = Vec::with_capacity(outcomes.len());
    for (i, &hit) in outcomes.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let interpolated = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            // first index whose recall reaches r
            let idx = recall.partition_point(|&x| x < r - 1e-12);
            envelope.get(idx).copied().unwrap_or(0.0)
        })
        .collect();
    PrCurve {
        recall,
        precision,
        interpolated,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by the threshold formatted to two decimals ("0.50").
    pub ap_per_threshold: BTreeMap<String, Option<f64>>,
    /// Mean AP over IoU 0.50:0.05:0.95.
    pub map_coco: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_detections: usize,
    pub box_choice: BoxChoice,
    pub pr_curves: BTreeMap<String, PrCurve>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

impl EvalReport {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.ap_per_threshold.get(&threshold_key(threshold)).copied().flatten()
    }

    /// The six-row metric table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "   absent".to_string(), |x| format!("{:>9.4}", x));
        let mut s = String::new();
        s.push_str(&format!(
            "images {}  ground truth {}  detections {}  boxes {:?}\n",
            self.num_images, self.num_gt, self.num_detections, self.box_choice
        ));
        for t in REPORT_THRESHOLDS {
            s.push_str(&format!("AP@{:<3}{}\n", (t * 100.0).round() as u32, fmt(self.ap_at(t))));
        }
        s.push_str(&format!("AP@S  {}\n", fmt(self.ap_small)));
        s.push_str(&format!("AP@M  {}\n", fmt(self.ap_medium)));
        s.push_str(&format!("AP@L  {}\n", fmt(self.ap_large)));
        s.push_str(&format!("mAP   {}\n", fmt(self.map_coco)));
        s
    }
}

/// Every metric of the report. Size-bucket APs use IoU 0.5:0.95 averaging.
pub fn evaluate(detections: &[Vec<Detection>], gts: &[Vec<GtBox>], choice: BoxChoice) -> EvalReport {
    let coco: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mean_over = |bucket: Option<SizeBucket>| -> Option<f64> {
        let aps: Vec<f64> = coco
            .iter()
            .filter_map(|&t| match_and_ap(detections, gts, t, bucket, choice).ap)
            .collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    };
    let mut report = EvalReport {
        num_images: gts.len(),
        num_gt: gts.iter().map(Vec::len).sum(),
        num_detections: detections.iter().map(Vec::len).sum(),
        box_choice: choice,
        ..Default::default()
    };
    for t in REPORT_THRESHOLDS {
        let r = match_and_ap(detections, gts, t, None, choice);
        report.ap_per_threshold.insert(threshold_key(t), r.ap);
        report.pr_curves.insert(threshold_key(t), r.curve);
    }
    report.map_coco = mean_over(None);
    report.ap_small = mean_over(Some(SizeBucket::Small));
    report.ap_medium = mean_over(Some(SizeBucket::Medium));
    report.ap_large = mean_over(Some(SizeBucket::Large));
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &[1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &[5.0, 5.0, 6.0, 6.0]), 0.0);
    }

    fn det(b: [f64; 4], score: f64) -> Detection {
        Detection {
            class_id: 0,
            score,
            coarse_box: b,
            refined_box: None,
        }
    }

    #[test]
    fn single_gt_hit_and_miss() {
        let gt = vec![vec![GtBox::new(0, 0.0, 0.0, 10.0, 10.0)]];
        let hit = vec![vec![det([0.0, 0.0, 10.0, 9.0], 0.9)]];
        let miss = vec![vec![det([20.0, 20.0, 30.0, 30.0], 0.9)]];
        assert_eq!(match_and_ap(&hit, &gt, 0.5, None, BoxChoice::Refined).ap, Some(1.0));
        assert_eq!(match_and_ap(&miss, &gt, 0.5, None, BoxChoice::Refined).ap, Some(0.0));
    }

    #[test]
    fn no_gt_is_absent() {
        let r = match_and_ap(&[vec![]], &[vec![]], 0.5, None, BoxChoice::Refined);
        assert_eq!(r.ap, None);
        let gt = vec![vec![GtBox::new(0, 0.0, 0.0, 10.0, 10.0)]];
        let r = match_and_ap(&[vec![]], &gt, 0.5, Some(SizeBucket::Large), BoxChoice::Refined);
        assert_eq!(r.ap, None);
    }

    #[test]
    fn buckets_partition() {
        assert_eq!(SizeBucket::of_area(0.0), SizeBucket::Small);
        assert_eq!(SizeBucket::of_area(4096.0), SizeBucket::Small);
        assert_eq!(SizeBucket::of_area(4096.5), SizeBucket::Medium);
        assert_eq!(SizeBucket::of_area(16384.0), SizeBucket::Medium);
        assert_eq!(SizeBucket::of_area(16385.0), SizeBucket::Large);
    }
}
