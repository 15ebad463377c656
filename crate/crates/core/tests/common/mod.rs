//! Reference implementations used as test oracles. Each is written
//! independently of the library code it checks: plain loops, no shared
//! helpers.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saccade::autodiff::Tensor;
use saccade::decoder::Detection;
use saccade::encoder::GtBox;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn iou_ref(a: [f64; 4], b: [f64; 4]) -> f64 {
    let x0 = a[0].max(b[0]);
    let y0 = a[1].max(b[1]);
    let x1 = a[2].min(b[2]);
    let y1 = a[3].min(b[3]);
    let inter = if x1 > x0 && y1 > y0 { (x1 - x0) * (y1 - y0) } else { 0.0 };
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// Nested-loop 3x3 neighbourhood max with out-of-range cells ignored.
pub fn maxpool_ref(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dims3().unwrap();
    Tensor::from_fn3([c, h, w], |ci, y, xi| {
        let mut m = f64::NEG_INFINITY;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (yy, xx) = (y as i64 + dy, xi as i64 + dx);
                if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                    m = m.max(x.at3(ci, yy as usize, xx as usize));
                }
            }
        }
        m
    })
}

/// Cells that are >= every in-range neighbour.
pub fn local_max_ref(x: &Tensor) -> Vec<(usize, usize, usize)> {
    let (c, h, w) = x.dims3().unwrap();
    let mut out = Vec::new();
    for ci in 0..c {
        for y in 0..h {
            for xi in 0..w {
                let v = x.at3(ci, y, xi);
                let mut peak = true;
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in xi.saturating_sub(1)..=(xi + 1).min(w - 1) {
                        if x.at3(ci, yy, xx) > v {
                            peak = false;
                        }
                    }
                }
                if peak {
                    out.push((ci, y, xi));
                }
            }
        }
    }
    out
}

/// All nonzero cells as (class, col, row, score), fully sorted.
pub fn sorted_cells_ref(x: &Tensor) -> Vec<(usize, usize, usize, f64)> {
    let (c, h, w) = x.dims3().unwrap();
    let mut cells = Vec::new();
    for ci in 0..c {
        for y in 0..h {
            for xi in 0..w {
                let v = x.at3(ci, y, xi);
                if v != 0.0 {
                    cells.push((ci, y, xi, v));
                }
            }
        }
    }
    cells.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap().then((a.0, a.1, a.2).cmp(&(b.0, b.1, b.2))));
    cells.into_iter().map(|(c, y, x, v)| (c, x, y, v)).collect()
}

/// O(n²) suppression: detection i is dropped iff some earlier detection of
/// the same class that is itself kept overlaps it at >= threshold.
pub fn iou_nms_ref(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let n = dets.len();
    let mut keep = vec![true; n];
    for i in 0..n {
        for j in 0..i {
            if keep[j] && dets[j].class_id == dets[i].class_id && iou_ref(dets[j].best_box(), dets[i].best_box()) >= threshold {
                keep[i] = false;
                break;
            }
        }
    }
    dets.iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| d.clone()).collect()
}

/// Exhaustive single-corner sweep: every integer shift of one corner with
/// |dx|, |dy| <= d must keep IoU >= t. Returns the worst IoU seen.
pub fn worst_single_corner_iou(w: f64, h: f64, d: i64) -> f64 {
    let base = [0.0, 0.0, w, h];
    let mut worst = 1.0f64;
    for corner in 0..4 {
        for dx in -d..=d {
            for dy in -d..=d {
                let mut b = base;
                let (xi, yi) = match corner {
                    0 => (0, 1),
                    1 => (2, 1),
                    2 => (0, 3),
                    _ => (2, 3),
                };
                b[xi] += dx as f64;
                b[yi] += dy as f64;
                if b[2] <= b[0] || b[3] <= b[1] {
                    worst = 0.0;
                    continue;
                }
                worst = worst.min(iou_ref(base, b));
            }
        }
    }
    worst
}

/// Exhaustive 101-point AP: rank by score, greedily match each detection to
/// its highest-IoU free same-class box in the same image, then for each
/// recall level take the best precision at any rank reaching it.
pub fn ap_ref(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], thr: f64) -> Option<f64> {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return None;
    }
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            all.push((d.score, img, k));
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0.0;
    let mut points = Vec::new();
    for (rank, &(_, img, k)) in all.iter().enumerate() {
        let d = &dets[img][k];
        let mut best: Option<usize> = None;
        let mut best_iou = 0.0;
        for (j, g) in gts[img].iter().enumerate() {
            if used[img][j] || g.class_id != d.class_id {
                continue;
            }
            let v = iou_ref(d.best_box(), g.as_array());
            if v < thr {
                continue;
            }
            if best.is_none() || v > best_iou {
                best = Some(j);
                best_iou = v;
            }
        }
        if let Some(j) = best {
            used[img][j] = true;
            tp += 1.0;
        }
        points.push((tp / total as f64, tp / (rank + 1) as f64));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += p;
    }
    Some(sum / 101.0)
}

/// Random boxes inside a `size`-pixel square image, sides >= 8 px.
pub fn random_boxes(rng: &mut ChaCha8Rng, n: usize, size: f64, classes: usize) -> Vec<GtBox> {
    (0..n)
        .map(|_| {
            let w = rng.random_range(8.0..size / 2.0);
            let h = rng.random_range(8.0..size / 2.0);
            let x = rng.random_range(0.0..size - w);
            let y = rng.random_range(0.0..size - h);
            GtBox::new(rng.random_range(0..classes), x, y, x + w, y + h)
        })
        .collect()
}

/// Synthetic detections around ground truth: jittered hits, duplicates and
/// background false positives, with distinct random scores.
pub fn noisy_detections(rng: &mut ChaCha8Rng, gts: &[GtBox], size: f64, classes: usize) -> Vec<Detection> {
    let mut out = Vec::new();
    for g in gts {
        if rng.random_bool(0.8) {
            let j = rng.random_range(0.0..4.0);
            let mut b = g.as_array();
            for v in &mut b {
                *v += rng.random_range(-j..=j);
            }
            b[2] = b[2].max(b[0] + 1.0);
            b[3] = b[3].max(b[1] + 1.0);
            let class_id = if rng.random_bool(0.9) { g.class_id } else { rng.random_range(0..classes) };
            out.push(Detection {
                class_id,
                score: rng.random(),
                coarse_box: b,
                refined_box: None,
            });
        }
    }
    let extra = rng.random_range(0..4);
    for b in random_boxes(rng, extra, size, classes) {
        out.push(Detection {
            class_id: b.class_id,
            score: rng.random(),
            coarse_box: b.as_array(),
            refined_box: None,
        });
    }
    out
}

/// Like [`worst_single_corner_iou`] but both the top-left and bottom-right
/// corners move independently by up to `d` per axis.
pub fn worst_two_corner_iou(w: f64, h: f64, d: i64) -> f64 {
    let base = [0.0, 0.0, w, h];
    let mut worst = 1.0f64;
    for a in -d..=d {
        for b in -d..=d {
            for c in -d..=d {
                for e in -d..=d {
                    let bx = [a as f64, b as f64, w + c as f64, h + e as f64];
                    let v = if bx[2] <= bx[0] || bx[3] <= bx[1] { 0.0 } else { iou_ref(base, bx) };
                    worst = worst.min(v);
                }
            }
        }
    }
    worst
}

/// Boxes whose centers fall in distinct feature cells at least `sep` cells
/// apart (Chebyshev), for a square image of `size` px at stride 4.
pub fn separated_boxes(rng: &mut ChaCha8Rng, n: usize, size: f64, classes: usize, sep: usize) -> Vec<GtBox> {
    let mut out: Vec<GtBox> = Vec::new();
    let mut tries = 0;
    while out.len() < n && tries < 10_000 {
        tries += 1;
        let w = rng.random_range(6.0..size / 2.0);
        let h = rng.random_range(6.0..size / 2.0);
        let x = rng.random_range(0.0..size - w);
        let y = rng.random_range(0.0..size - h);
        let cell = |b: &GtBox| {
            let (cx, cy) = b.center();
            ((cx / 4.0).floor() as i64, (cy / 4.0).floor() as i64)
        };
        let b = GtBox::new(rng.random_range(0..classes), x, y, x + w, y + h);
        let c = cell(&b);
        if out.iter().all(|o| {
            let d = cell(o);
            (d.0 - c.0).abs().max((d.1 - c.1).abs()) >= sep as i64
        }) {
            out.push(b);
        }
    }
    out
}
