mod common;

use common::{ap_ref, noisy_detections, random_boxes, rng};
use proptest::prelude::*;
use rand::Rng;
use saccade::decoder::Detection;
use saccade::encoder::GtBox;
use saccade::evaluator::{evaluate, iou, match_and_ap, BoxChoice, SizeBucket};

fn scenes(seed: u64, n: usize, size: f64) -> (Vec<Vec<Detection>>, Vec<Vec<GtBox>>) {
    let mut r = rng(seed);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n {
        let k = r.random_range(0..6);
        let g = random_boxes(&mut r, k, size, 3);
        dets.push(noisy_detections(&mut r, &g, size, 3));
        gts.push(g);
    }
    (dets, gts)
}

fn perfect(gts: &[Vec<GtBox>]) -> Vec<Vec<Detection>> {
    gts.iter()
        .map(|g| {
            g.iter()
                .map(|b| Detection {
                    class_id: b.class_id,
                    score: 1.0,
                    coarse_box: b.as_array(),
                    refined_box: None,
                })
                .collect()
        })
        .collect()
}

#[test]
fn iou_examples() {
    assert_eq!(iou(&[1.0, 2.0, 5.0, 7.0], &[1.0, 2.0, 5.0, 7.0]), 1.0);
    assert!((iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-15);
    assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]), 0.0);
}

#[test]
fn ap_matches_exhaustive_reference() {
    for seed in 0..5 {
        let (dets, gts) = scenes(40 + seed, 20, 64.0);
        for thr in [0.5, 0.6, 0.7, 0.8, 0.9] {
            let got = match_and_ap(&dets, &gts, thr, None, BoxChoice::Coarse).ap;
            let want = ap_ref(&dets, &gts, thr);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "seed {seed} thr {thr}: {a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }
}

#[test]
fn perfect_and_empty_detectors() {
    let (_, gts) = scenes(41, 20, 300.0);
    let r = evaluate(&perfect(&gts), &gts, BoxChoice::Refined);
    for t in [0.5, 0.7, 0.9] {
        assert_eq!(r.ap_at(t), Some(1.0));
    }
    assert_eq!(r.map_coco, Some(1.0));
    for b in [r.ap_small, r.ap_medium, r.ap_large] {
        assert!(b.is_none() || b == Some(1.0));
    }

    let empty: Vec<Vec<Detection>> = vec![Vec::new(); gts.len()];
    let r = evaluate(&empty, &gts, BoxChoice::Refined);
    assert_eq!(r.ap_at(0.5), Some(0.0));
    assert_eq!(r.map_coco, Some(0.0));
    for b in [r.ap_small, r.ap_medium, r.ap_large].into_iter().flatten() {
        assert_eq!(b, 0.0);
    }

    let none = evaluate(&[], &[], BoxChoice::Refined);
    assert_eq!(none.ap_at(0.5), None);
    assert_eq!(none.map_coco, None);
}

#[test]
fn precision_envelope_is_monotone() {
    let (dets, gts) = scenes(42, 20, 64.0);
    let r = evaluate(&dets, &gts, BoxChoice::Coarse);
    for c in r.pr_curves.values() {
        assert_eq!(c.interpolated.len(), 101);
        assert!(c.interpolated.windows(2).all(|w| w[0] >= w[1]));
        assert!(c.interpolated.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ap_monotone_in_threshold(seed in 0u64..10_000) {
        let (dets, gts) = scenes(seed, 8, 64.0);
        let aps: Vec<Option<f64>> = (0..10)
            .map(|i| match_and_ap(&dets, &gts, 0.5 + 0.05 * i as f64, None, BoxChoice::Coarse).ap)
            .collect();
        for w in aps.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                prop_assert!(b <= a + 1e-12);
            }
        }
    }

    #[test]
    fn ap_invariant_under_monotone_score_transform(seed in 0u64..10_000) {
        let (dets, gts) = scenes(seed, 8, 64.0);
        let squashed: Vec<Vec<Detection>> = dets
            .iter()
            .map(|ds| ds.iter().map(|d| Detection { score: (3.0 * d.score - 1.0).tanh() * 0.1 + 0.5, ..d.clone() }).collect())
            .collect();
        for thr in [0.5, 0.75] {
            let a = match_and_ap(&dets, &gts, thr, None, BoxChoice::Coarse).ap;
            let b = match_and_ap(&squashed, &gts, thr, None, BoxChoice::Coarse).ap;
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn buckets_partition_ground_truth(seed in 0u64..10_000) {
        let (dets, gts) = scenes(seed, 6, 400.0);
        let total = match_and_ap(&dets, &gts, 0.5, None, BoxChoice::Coarse).num_gt;
        let parts: usize = SizeBucket::ALL
            .iter()
            .map(|&b| match_and_ap(&dets, &gts, 0.5, Some(b), BoxChoice::Coarse).num_gt)
            .sum();
        prop_assert_eq!(total, parts);
        prop_assert_eq!(total, gts.iter().map(Vec::len).sum::<usize>());
    }
}

#[test]
fn duplicates_above_true_positives_reduce_ap() {
    let gts = vec![vec![GtBox::new(0, 0.0, 0.0, 10.0, 10.0), GtBox::new(1, 20.0, 20.0, 30.0, 30.0)]];
    let hit = |c: usize, b: [f64; 4], s: f64| Detection {
        class_id: c,
        score: s,
        coarse_box: b,
        refined_box: None,
    };
    let clean = vec![vec![hit(0, [0.0, 0.0, 10.0, 10.0], 0.9), hit(1, [20.0, 20.0, 30.0, 30.0], 0.7)]];
    let mut dup = clean.clone();
    dup[0].push(hit(0, [0.0, 0.0, 10.0, 10.0], 0.8));
    let a = match_and_ap(&clean, &gts, 0.5, None, BoxChoice::Coarse).ap.unwrap();
    let b = match_and_ap(&dup, &gts, 0.5, None, BoxChoice::Coarse).ap.unwrap();
    assert_eq!(a, 1.0);
    assert!(b < a, "{b}");
}

#[test]
fn jittered_detector_scores_lower_at_strict_threshold() {
    let mut r = rng(43);
    let (_, gts) = scenes(44, 50, 64.0);
    // 0.3 feature cells at stride 4
    let jitter = 0.3 * 4.0;
    let dets: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| {
            g.iter()
                .map(|b| {
                    let mut a = b.as_array();
                    for v in &mut a {
                        *v += r.random_range(-jitter..=jitter);
                    }
                    Detection {
                        class_id: b.class_id,
                        score: r.random(),
                        coarse_box: a,
                        refined_box: None,
                    }
                })
                .collect()
        })
        .collect();
    let rep = evaluate(&dets, &gts, BoxChoice::Coarse);
    assert!(rep.ap_at(0.5).unwrap() > rep.ap_at(0.9).unwrap());
}

#[test]
fn bucket_ignores_out_of_scope_matches() {
    // one small and one large ground truth; only the large one is detected
    let gts = vec![vec![GtBox::new(0, 0.0, 0.0, 20.0, 20.0), GtBox::new(0, 100.0, 100.0, 300.0, 300.0)]];
    let dets = vec![vec![Detection {
        class_id: 0,
        score: 0.9,
        coarse_box: [100.0, 100.0, 300.0, 300.0],
        refined_box: None,
    }]];
    let small = match_and_ap(&dets, &gts, 0.5, Some(SizeBucket::Small), BoxChoice::Coarse);
    assert_eq!((small.num_gt, small.ap), (1, Some(0.0)));
    let large = match_and_ap(&dets, &gts, 0.5, Some(SizeBucket::Large), BoxChoice::Coarse);
    assert_eq!((large.num_gt, large.ap), (1, Some(1.0)));
    let medium = match_and_ap(&dets, &gts, 0.5, Some(SizeBucket::Medium), BoxChoice::Coarse);
    assert_eq!(medium.ap, None);
}

#[test]
fn report_round_trips_through_json() {
    let (dets, gts) = scenes(45, 10, 64.0);
    let rep = evaluate(&dets, &gts, BoxChoice::Coarse);
    let text = serde_json::to_string(&rep).unwrap();
    let back: saccade::evaluator::EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, rep);
    assert!(rep.table().lines().count() >= 7);
}
