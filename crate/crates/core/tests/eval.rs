mod common;

use common::oracles::{dyadic_box, rng};
use common::pipeline::{quick_projection, MiniPipeline};
use farsight_core::cascade::CascadeConfig;
use farsight_core::dataset_io::GtBox;
use farsight_core::eval::*;
use farsight_core::ssd::Detection;
use farsight_core::{iou, BBox, Error};
use proptest::prelude::*;
use rand::Rng;

fn gt(x0: f64, y0: f64, x1: f64, y1: f64, class_id: u8) -> GtBox {
    GtBox {
        bbox: BBox::from_corners(x0, y0, x1, y1),
        class_id,
    }
}

fn det(x0: f64, y0: f64, x1: f64, y1: f64, class_id: u8, confidence: f64) -> Detection {
    Detection {
        bbox: BBox::from_corners(x0, y0, x1, y1),
        class_id,
        confidence,
    }
}

fn truths3() -> Vec<GtBox> {
    vec![
        gt(0.0, 0.0, 0.2, 0.2, 1),
        gt(0.5, 0.5, 0.7, 0.7, 2),
        gt(0.3, 0.0, 0.5, 0.2, 3),
    ]
}

#[test]
fn perfect_and_empty_detections() {
    let truths = truths3();
    let exact: Vec<Detection> = truths.iter().map(|t| Detection { bbox: t.bbox, class_id: t.class_id, confidence: 0.9 }).collect();
    let r = detection_rate(&exact, &truths, &EvalConfig::default());
    assert_eq!(r.rate, 1.0);
    assert_eq!(r.matched, 3);
    assert_eq!(r.precision(), 1.0);

    let r = detection_rate(&[], &truths, &EvalConfig::default());
    assert_eq!(r.rate, 0.0);
    assert_eq!(r.precision(), 1.0);
    assert!(r.warning.is_none());
}

#[test]
fn two_of_three_found() {
    let truths = truths3();
    let dets = vec![
        det(0.0, 0.0, 0.2, 0.2, 1, 0.9),
        // IoU 0.0256 / 0.0544 with the second truth, below 0.5
        det(0.54, 0.54, 0.74, 0.74, 2, 0.8),
        det(0.32, 0.0, 0.52, 0.2, 3, 0.7),
        // right place, wrong class
        det(0.5, 0.5, 0.7, 0.7, 4, 0.95),
    ];
    let r = detection_rate(&dets, &truths, &EvalConfig::default());
    assert!((r.rate - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.detections, 4);
    assert_eq!(r.precision(), 0.5);

    let any_class = EvalConfig {
        require_class: false,
        ..EvalConfig::default()
    };
    assert_eq!(detection_rate(&dets, &truths, &any_class).rate, 1.0);
    assert_eq!(best_assignment(&dets, &truths, &EvalConfig::default()), 2);
}

#[test]
fn confidence_threshold_filters_detections() {
    let truths = truths3();
    let dets = vec![det(0.0, 0.0, 0.2, 0.2, 1, 0.49), det(0.5, 0.5, 0.7, 0.7, 2, 0.5)];
    let r = detection_rate(&dets, &truths, &EvalConfig::default());
    assert_eq!((r.matched, r.detections), (1, 1));
    let r = detection_rate(&dets, &truths, &EvalConfig { conf_thr: 0.0, ..EvalConfig::default() });
    assert_eq!((r.matched, r.detections), (2, 2));
}

#[test]
fn no_truths_is_flagged() {
    let r = detection_rate(&[det(0.0, 0.0, 0.1, 0.1, 0, 0.9)], &[], &EvalConfig::default());
    assert_eq!(r.rate, 1.0);
    assert!(r.warning.is_some());
}

#[test]
fn config_validation() {
    for cfg in [
        EvalConfig { iou_thr: 0.0, ..EvalConfig::default() },
        EvalConfig { iou_thr: 1.0, ..EvalConfig::default() },
        EvalConfig { conf_thr: 1.5, ..EvalConfig::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Invalid(_))));
    }
}

/// Maximum number of truths any one-to-one assignment can cover, by
/// exhaustive search. Greedy matching never exceeds it.
fn best_assignment(dets: &[Detection], truths: &[GtBox], cfg: &EvalConfig) -> usize {
    let dets: Vec<&Detection> = dets.iter().filter(|d| d.confidence >= cfg.conf_thr).collect();
    fn go(i: usize, dets: &[&Detection], truths: &[GtBox], used: &mut Vec<bool>, cfg: &EvalConfig) -> usize {
        if i == dets.len() {
            return 0;
        }
        let mut best = go(i + 1, dets, truths, used, cfg);
        for t in 0..truths.len() {
            let ok = !used[t]
                && (!cfg.require_class || truths[t].class_id == dets[i].class_id)
                && iou(&dets[i].bbox, &truths[t].bbox) >= cfg.iou_thr;
            if ok {
                used[t] = true;
                best = best.max(1 + go(i + 1, dets, truths, used, cfg));
                used[t] = false;
            }
        }
        best
    }
    go(0, &dets, truths, &mut vec![false; truths.len()], cfg)
}

fn instance(seed: u64, n_truths: usize, n_dets: usize) -> (Vec<GtBox>, Vec<Detection>) {
    let mut r = rng(seed);
    let truths: Vec<GtBox> = (0..n_truths)
        .map(|_| GtBox {
            bbox: dyadic_box(&mut r),
            class_id: r.gen_range(0..3u8),
        })
        .collect();
    let dets = (0..n_dets)
        .map(|_| {
            // half the detections are jittered copies of a truth
            let (bbox, class_id) = if !truths.is_empty() && r.gen_bool(0.5) {
                let t = &truths[r.gen_range(0..truths.len())];
                let [x0, y0, x1, y1] = t.bbox.corners();
                let j = r.gen_range(0.0..0.05);
                (BBox::from_corners(x0 + j, y0, x1 + j, y1), t.class_id)
            } else {
                (dyadic_box(&mut r), r.gen_range(0..3u8))
            };
            Detection {
                bbox,
                class_id,
                confidence: r.gen_range(1..20u32) as f64 / 20.0,
            }
        })
        .collect();
    (truths, dets)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rate_is_a_valid_one_to_one_matching(seed in any::<u64>(), nt in 0usize..6, nd in 0usize..8, any_class in any::<bool>()) {
        let (truths, dets) = instance(seed, nt, nd);
        let cfg = EvalConfig { require_class: !any_class, ..EvalConfig::default() };
        let r = detection_rate(&dets, &truths, &cfg);
        prop_assert!((0.0..=1.0).contains(&r.rate));
        prop_assert!(r.matched <= truths.len() && r.matched <= r.detections);
        let mut seen_t: Vec<usize> = r.pairs.iter().map(|p| p.truth).collect();
        let mut seen_d: Vec<usize> = r.pairs.iter().map(|p| p.detection).collect();
        seen_t.sort();
        seen_t.dedup();
        seen_d.sort();
        seen_d.dedup();
        prop_assert_eq!(seen_t.len(), r.pairs.len());
        prop_assert_eq!(seen_d.len(), r.pairs.len());
        for p in &r.pairs {
            let (d, t) = (&dets[p.detection], &truths[p.truth]);
            prop_assert!(p.iou >= cfg.iou_thr);
            prop_assert!(d.confidence >= cfg.conf_thr);
            prop_assert!(!cfg.require_class || d.class_id == t.class_id);
        }
        prop_assert!(r.matched <= best_assignment(&dets, &truths, &cfg));
    }

    #[test]
    fn a_perfect_extra_detection_never_lowers_the_rate(seed in any::<u64>(), nt in 1usize..6, nd in 0usize..8) {
        let (truths, mut dets) = instance(seed, nt, nd);
        let cfg = EvalConfig::default();
        let before = detection_rate(&dets, &truths, &cfg);
        let taken: Vec<usize> = before.pairs.iter().map(|p| p.truth).collect();
        if let Some(t) = (0..truths.len()).find(|t| !taken.contains(t)) {
            // above every other confidence so it is matched first
            dets.push(Detection { bbox: truths[t].bbox, class_id: truths[t].class_id, confidence: 1.0 });
            let after = detection_rate(&dets, &truths, &cfg);
            prop_assert!(after.rate >= before.rate);
        }
    }
}

fn comparison(p: &MiniPipeline, t_rescore: f64) -> ComparisonReport {
    let cascade = CascadeConfig {
        t_rescore,
        small_max_area: 0.06,
        projection: quick_projection(),
        ..CascadeConfig::default()
    };
    run_comparison(&p.scenes, &p.nets(), &cascade, &EvalConfig::default()).unwrap()
}

#[test]
fn control_arm_matches_the_detector() {
    let p = MiniPipeline::shared();
    let r = comparison(p, 1.0);
    assert_eq!(r.scenes.len(), p.scenes.len());
    assert_eq!(r.aggregate.baseline, r.aggregate.cascade);
    for row in &r.scenes {
        assert_eq!(row.baseline_rate, row.cascade_rate);
        assert_eq!(row.promoted, 0);
    }
    let truths: usize = p.scenes.iter().map(|s| s.truths.len()).sum();
    assert_eq!(r.aggregate.truths, truths);
    assert_eq!(r.seeds.scene_projection_seeds.len(), p.scenes.len());
}

#[test]
fn per_level_rows_partition_the_scenes() {
    let p = MiniPipeline::shared();
    let r = comparison(p, 0.3);
    let scenes: usize = r.by_degradation.iter().map(|l| l.scenes).sum();
    let truths: usize = r.by_degradation.iter().map(|l| l.truths).sum();
    assert_eq!(scenes, p.scenes.len());
    assert_eq!(truths, r.aggregate.truths);
    let matched: usize = r.scenes.iter().map(|s| s.cascade_matched).sum();
    assert_eq!(r.aggregate.cascade, matched as f64 / r.aggregate.truths as f64);
}

#[test]
fn report_files_are_complete_and_reproducible() {
    let p = MiniPipeline::shared();
    let report = comparison(p, 0.3);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = emit_report(&report, a.path()).unwrap();
    emit_report(&comparison(p, 0.3), b.path()).unwrap();

    let json = std::fs::read(&files.json).unwrap();
    assert_eq!(json, std::fs::read(b.path().join("report.json")).unwrap());
    let back: ComparisonReport = serde_json::from_slice(&json).unwrap();
    assert_eq!(back, report);

    let csv = std::fs::read_to_string(&files.csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), p.scenes.len() + 1);
    assert!(lines[0].starts_with("id,baseline_rate,cascade_rate,truths,degradation_level"));
    assert!(lines.iter().all(|l| l.split(',').count() == 11));

    let plot = image::open(&files.plot).unwrap();
    assert_eq!((plot.width(), plot.height()), (480, 320));
}

#[test]
fn comparison_rejects_no_scenes() {
    let p = MiniPipeline::shared();
    let r = run_comparison(&[], &p.nets(), &CascadeConfig::default(), &EvalConfig::default());
    assert!(matches!(r, Err(Error::Invalid(_))));
}
