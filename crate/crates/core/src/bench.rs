//! Peak-picking vs IoU-based NMS: cross-mode agreement and timing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::decoder::{decode, DecoderConfig, Detection, NmsMode};
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, NetworkOutputs};

const NUM_CLASSES: usize = 3;
/// Object side in feature cells; large enough that a one-cell shift keeps
/// IoU above 0.5, so IoU-NMS suppresses blob neighbours.
const OBJECT_CELLS: f64 = 8.0;
const MIN_SAME_CLASS_SEPARATION: usize = 6;
const IOU_THRESHOLD: f64 = 0.5;
/// Dense background like a sigmoid output, kept below the score threshold.
const BACKGROUND: (f64, f64) = (1e-3, 1e-2);
const SCORE_THRESHOLD: f64 = 0.05;
const TIMING_TOP_K: usize = 100;
pub const PRECHECK_INPUTS: usize = 100;

/// Synthetic decoder input: isolated 3x3 score blobs with strictly
/// decreasing, distinct values away from each blob center, over a dense
/// low background.
pub fn tie_free_outputs(size: usize, objects: usize, rng: &mut ChaCha8Rng) -> NetworkOutputs {
    let mut heat = Tensor::from_fn3([NUM_CLASSES, size, size], |_, _, _| rng.random_range(BACKGROUND.0..BACKGROUND.1));
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    let margin = 1;
    let mut tries = 0;
    while placed.len() < objects && tries < 100 * objects.max(1) {
        tries += 1;
        let c = rng.random_range(0..NUM_CLASSES);
        let x = rng.random_range(margin..size - margin);
        let y = rng.random_range(margin..size - margin);
        let ok = placed.iter().all(|&(pc, px, py)| {
            let d = px.abs_diff(x).max(py.abs_diff(y));
            d >= 3 && (pc != c || d >= MIN_SAME_CLASS_SEPARATION)
        });
        if ok {
            placed.push((c, x, y));
        }
    }
    for &(c, x, y) in &placed {
        let peak = rng.random_range(0.5..1.0);
        heat.set3(c, y, x, peak);
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let v = peak * rng.random_range(0.1..0.9);
                heat.set3(c, (y as i32 + dy) as usize, (x as i32 + dx) as usize, v);
            }
        }
    }
    NetworkOutputs {
        center_heatmap: heat,
        wh_map: Tensor::full(&[2, size, size], OBJECT_CELLS),
        offset_map: Tensor::zeros(&[2, size, size]),
        corner_heatmap: None,
        backbone_features: Tensor::zeros(&[1, size, size]),
    }
}

fn bench_net(size: usize) -> NetworkConfig {
    NetworkConfig {
        num_classes: NUM_CLASSES,
        input_height: size * 4,
        input_width: size * 4,
        aggregation: false,
        ..NetworkConfig::default()
    }
}

/// Exhaustive `top_k` for the agreement check; the timed runs use the
/// standard top-100.
fn decoder_for(mode: NmsMode, top_k: usize) -> DecoderConfig {
    DecoderConfig {
        top_k,
        score_threshold: SCORE_THRESHOLD,
        nms_mode: mode,
        use_refinement: false,
        ..DecoderConfig::default()
    }
}

fn canonical(mut d: Vec<Detection>) -> Vec<(usize, [u64; 4], u64)> {
    d.sort_by(|a, b| b.score.total_cmp(&a.score));
    d.into_iter()
        .map(|x| (x.class_id, x.coarse_box.map(f64::to_bits), x.score.to_bits()))
        .collect()
}

/// Both NMS modes on one input; `Ok(true)` when the final detection sets match.
pub fn modes_agree(outputs: &NetworkOutputs) -> Result<bool> {
    let size = outputs.center_heatmap.shape()[1];
    let net = bench_net(size);
    let all = NUM_CLASSES * size * size;
    let pp = decode(outputs, None, &decoder_for(NmsMode::PeakPicking, all), &net)?;
    let iou = decode(
        outputs,
        None,
        &decoder_for(NmsMode::Iou { threshold: IOU_THRESHOLD }, all),
        &net,
    )?;
    Ok(canonical(pp) == canonical(iou))
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub map_size: usize,
    pub objects: usize,
    pub mode: &'static str,
    pub median_us: f64,
    pub p95_us: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub precheck_inputs: usize,
    pub precheck_passed: bool,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "cross-mode agreement on {} tie-free inputs: {}\n{:>8} {:>8} {:>6} {:>12} {:>12}\n",
            self.precheck_inputs,
            if self.precheck_passed { "PASS" } else { "FAIL" },
            "map",
            "objects",
            "mode",
            "median_us",
            "p95_us"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>8} {:>8} {:>6} {:>12.1} {:>12.1}\n",
                r.map_size, r.objects, r.mode, r.median_us, r.p95_us
            ));
        }
        s
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Agreement precheck followed by timing of each mode per workload.
pub fn run_nms_bench(sizes: &[usize], densities: &[usize], repeats: usize, seed: u64) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s < 16) {
        return Err(Error::InvalidArgument(format!("map size {s} below the minimum of 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = true;
    for i in 0..PRECHECK_INPUTS {
        let size = sizes[i % sizes.len()];
        let objects = densities[i % densities.len()];
        if !modes_agree(&tie_free_outputs(size, objects, &mut rng))? {
            passed = false;
        }
    }
    let mut report = BenchReport {
        precheck_inputs: PRECHECK_INPUTS,
        precheck_passed: passed,
        rows: Vec::new(),
    };
    if !passed {
        return Ok(report);
    }
    for &size in sizes {
        let net = bench_net(size);
        for &objects in densities {
            let inputs: Vec<NetworkOutputs> = (0..repeats).map(|_| tie_free_outputs(size, objects, &mut rng)).collect();
            for (label, mode) in [
                ("pp", NmsMode::PeakPicking),
                ("iou", NmsMode::Iou { threshold: IOU_THRESHOLD }),
            ] {
                let cfg = decoder_for(mode, TIMING_TOP_K);
                let mut times: Vec<f64> = inputs
                    .iter()
                    .map(|o| {
                        let t = Instant::now();
                        let d = decode(o, None, &cfg, &net)?;
                        std::hint::black_box(d);
                        Ok(t.elapsed().as_secs_f64() * 1e6)
                    })
                    .collect::<Result<_>>()?;
                times.sort_by(f64::total_cmp);
                report.rows.push(BenchRow {
                    map_size: size,
                    objects,
                    mode: label,
                    median_us: percentile(&times, 0.5),
                    p95_us: percentile(&times, 0.95),
                });
            }
        }
    }
    Ok(report)
}
