//! Heatmap focal loss, masked L1 regression losses, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::GroundTruthTarget;
use crate::error::{Error, Result};
use crate::network::OutputVars;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            epsilon: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub center: f64,
    pub corner: f64,
    pub aggregation: f64,
    pub wh: f64,
    pub center_offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            center: 1.0,
            corner: 1.0,
            aggregation: 0.1,
            wh: 0.1,
            center_offset: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("center", self.center),
            ("corner", self.corner),
            ("aggregation", self.aggregation),
            ("wh", self.wh),
            ("center_offset", self.center_offset),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    field: format!("loss_weights.{name}"),
                    reason: format!("{v} must be finite and non-negative"),
                });
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub center_focal: f64,
    pub corner_focal: f64,
    pub wh_l1: f64,
    pub offset_l1: f64,
    pub refine_l1: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("total", self.total),
            ("center_focal", self.center_focal),
            ("corner_focal", self.corner_focal),
            ("wh_l1", self.wh_l1),
            ("offset_l1", self.offset_l1),
            ("refine_l1", self.refine_l1),
        ]
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.center * self.center_focal
            + w.corner * self.corner_focal
            + w.wh * self.wh_l1
            + w.center_offset * self.offset_l1
            + w.aggregation * self.refine_l1
    }

    /// Elementwise accumulation, used for batch means.
    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.total += s * other.total;
        self.center_focal += s * other.center_focal;
        self.corner_focal += s * other.corner_focal;
        self.wh_l1 += s * other.wh_l1;
        self.offset_l1 += s * other.offset_l1;
        self.refine_l1 += s * other.refine_l1;
    }
}

/// Focal loss and its gradient with respect to `pred`, normalised by the
/// number of cells where `gt == 1` (at least one).
pub fn focal_loss_with_grad(pred: &[f64], gt: &[f64], p: &FocalParams) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "focal_loss",
            format!("pred has {} cells, gt has {}", pred.len(), gt.len()),
        ));
    }
    let (lo, hi) = (p.epsilon, 1.0 - p.epsilon);
    let positives = gt.iter().filter(|&&y| y == 1.0).count().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&raw, &y) in pred.iter().zip(gt) {
        let q = raw.clamp(lo, hi);
        let inside = raw > lo && raw < hi;
        let (loss, d) = if y == 1.0 {
            let one_m = 1.0 - q;
            let loss = -one_m.powf(p.alpha) * q.ln();
            let d = p.alpha * one_m.powf(p.alpha - 1.0) * q.ln() - one_m.powf(p.alpha) / q;
            (loss, d)
        } else {
            let neg_w = (1.0 - y).powf(p.beta);
            let log1m = (1.0 - q).ln();
            let loss = -neg_w * q.powf(p.alpha) * log1m;
            let d = -neg_w * (p.alpha * q.powf(p.alpha - 1.0) * log1m - q.powf(p.alpha) / (1.0 - q));
            (loss, d)
        };
        total += loss;
        grad.push(if inside { d / positives } else { 0.0 });
    }
    Ok((total / positives, grad))
}

pub fn focal_loss(pred: &Tensor, gt: &Tensor, p: &FocalParams) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "focal_loss",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok(focal_loss_with_grad(pred.data(), gt.data(), p)?.0)
}

/// Masked L1 over `[C, H, W]` maps with a spatial `[H, W]` mask, summed
/// over channels and normalised by the number of masked cells (at least 1).
pub fn masked_l1_with_grad(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "masked_l1",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let (c, h, w) = pred.dims3()?;
    if mask.len() != h * w {
        return Err(Error::shape(
            "masked_l1",
            format!("mask has {} cells, maps are {h}x{w}", mask.len()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
    let plane = h * w;
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for ci in 0..c {
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let k = ci * plane + i;
            let diff = pred.data()[k] - target.data()[k];
            total += diff.abs();
            grad[k] = if diff > 0.0 {
                1.0 / count
            } else if diff < 0.0 {
                -1.0 / count
            } else {
                0.0
            };
        }
    }
    Ok((total / count, grad))
}

pub fn masked_l1(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<f64> {
    Ok(masked_l1_with_grad(pred, target, mask)?.0)
}

/// Records the focal loss of a heatmap var in the graph.
pub fn focal_loss_node(g: &mut Graph, pred: Var, gt: &Tensor, p: &FocalParams) -> Result<Var> {
    if g.value(pred).shape() != gt.shape() {
        return Err(Error::shape(
            "focal_loss",
            format!("{:?} vs {:?}", g.value(pred).shape(), gt.shape()),
        ));
    }
    let (value, grad) = focal_loss_with_grad(g.value(pred).data(), gt.data(), p)?;
    g.scalar_loss(pred, value, grad)
}

pub fn masked_l1_node(g: &mut Graph, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
    let (value, grad) = masked_l1_with_grad(g.value(pred), target, mask)?;
    g.scalar_loss(pred, value, grad)
}

/// Refinement residual predictions (`[2, 1, N]`) together with their
/// regression targets `gt_wh - detached_start_wh`, one entry per iteration.
#[derive(Debug, Default)]
pub struct RefineResiduals {
    pub predictions: Vec<Var>,
    pub targets: Vec<Tensor>,
}

/// Builds the weighted training objective. Weights apply after each term's
/// own normalisation. Refinement terms are averaged over iterations.
pub fn total_loss(
    g: &mut Graph,
    outputs: &OutputVars,
    refine: &RefineResiduals,
    target: &GroundTruthTarget,
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<(Var, LossBreakdown)> {
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut breakdown = LossBreakdown::default();

    let center = focal_loss_node(g, outputs.center_heatmap, &target.center_heatmap, focal)?;
    breakdown.center_focal = g.value(center).data()[0];
    terms.push((center, weights.center));

    if let Some(corner_map) = outputs.corner_heatmap {
        let corner = focal_loss_node(g, corner_map, &target.corner_heatmap, focal)?;
        breakdown.corner_focal = g.value(corner).data()[0];
        terms.push((corner, weights.corner));
    }

    let wh = masked_l1_node(g, outputs.wh_map, &target.wh_target, &target.keypoint_mask)?;
    breakdown.wh_l1 = g.value(wh).data()[0];
    terms.push((wh, weights.wh));

    let off = masked_l1_node(g, outputs.offset_map, &target.offset_target, &target.keypoint_mask)?;
    breakdown.offset_l1 = g.value(off).data()[0];
    terms.push((off, weights.center_offset));

    if refine.predictions.len() != refine.targets.len() {
        return Err(Error::shape("total_loss", "refinement predictions and targets differ in count"));
    }
    let iters = refine.predictions.len() as f64;
    for (pred, tgt) in refine.predictions.iter().zip(&refine.targets) {
        let n = tgt.shape()[2];
        let l = masked_l1_node(g, *pred, tgt, &vec![true; n])?;
        breakdown.refine_l1 += g.value(l).data()[0] / iters;
        terms.push((l, weights.aggregation / iters));
    }

    let mut total: Option<Var> = None;
    for (v, w) in terms {
        let scaled = g.scale(v, w);
        total = Some(match total {
            None => scaled,
            Some(acc) => g.add(acc, scaled)?,
        });
    }
    let total = total.expect("center term always present");
    breakdown.total = g.value(total).data()[0];
    Ok((total, breakdown))
}
