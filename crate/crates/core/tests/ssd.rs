mod common;

use common::multibox_gradcheck::{check_multibox_gradients, random_predictions, tiny_instance};

use common::oracles::{self, dyadic_box, iou_oracle, match_oracle, nms_oracle, random_detections, random_truths};
use farsight_core::dataset_io::synthetic::surrogate_records;
use farsight_core::dataset_io::{compose_benchmark, BenchmarkSpec, GtBox, ImageChip, Scene};
use farsight_core::ssd::*;
use farsight_core::{iou, BBox, Error};
use proptest::prelude::*;
use rand::Rng;

fn standard_grids() -> Vec<(usize, Vec<f64>)> {
    GRIDS.iter().map(|&f| (f, vec![1.0, 2.0, 0.5])).collect()
}

#[test]
fn default_box_scales_and_count() {
    let scales = map_scales(3, 0.2, 0.9);
    for (s, e) in scales.iter().zip([0.2, 0.55, 0.9]) {
        assert!((s - e).abs() < 1e-12);
    }
    let set = build_default_boxes(&standard_grids(), 0.2, 0.9).unwrap();
    assert_eq!(set.len(), 1344);
    assert!(set.layout.iter().all(|l| l.boxes_per_cell == 4));
    assert_eq!(DetectorConfig::default().default_boxes().unwrap(), set);
    assert_eq!(map_scales(1, 0.3, 0.9), vec![0.3]);
}

#[test]
fn default_box_geometry() {
    let set = build_default_boxes(&standard_grids(), 0.2, 0.9).unwrap();
    // cell (0, 0) of the 4x4 map, ratio 1, scale 0.9
    let last = &set.layout[2];
    assert_eq!(last.grid, 4);
    assert!((last.scale - 0.9).abs() < 1e-12);
    let b = set.boxes[last.offset];
    let [x0, y0, x1, y1] = b.corners();
    assert!((b.cx - (0.0 + 0.575) / 2.0).abs() < 1e-12);
    assert_eq!((x0, y0), (0.0, 0.0));
    assert!((x1 - 0.575).abs() < 1e-12 && (y1 - 0.575).abs() < 1e-12);
    // the extra square box of the last map uses sqrt(0.9 * 1.0)
    let extra = set.boxes[last.offset + 1 + 4 * 5];
    let centre = BBox::new(0.375, 0.375, 0.9f64.sqrt(), 0.9f64.sqrt()).clipped();
    assert!((extra.w - centre.w).abs() < 1e-12 && (extra.cx - centre.cx).abs() < 1e-12);
    // first map, cell (0, 1), ratio 2 is wide
    let r2 = set.boxes[4 + 2];
    assert!((r2.cy - 0.5 / 16.0).abs() < 1e-12 || r2.corners()[1] == 0.0);
    assert!(r2.w > r2.h);
    assert!(set.boxes.iter().all(|b| b.is_inside_unit(1e-12) && b.w > 0.0 && b.h > 0.0));
}

#[test]
fn invalid_scales_are_rejected() {
    assert!(build_default_boxes(&standard_grids(), 0.9, 0.2).is_err());
    assert!(build_default_boxes(&standard_grids(), 0.0, 0.5).is_err());
    assert!(build_default_boxes(&standard_grids(), 0.2, 1.5).is_err());
    assert!(build_default_boxes(&[(0, vec![1.0])], 0.2, 0.9).is_err());
}

proptest! {
    #[test]
    fn default_box_count_formula(
        maps in prop::collection::vec((1usize..9, prop::collection::vec(prop::sample::select(vec![0.5, 1.0, 2.0, 3.0, 1.0 / 3.0]), 1..4)), 1..4),
        s_min in 0.05f64..0.4,
        span in 0.1f64..0.6,
    ) {
        let set = build_default_boxes(&maps, s_min, s_min + span).unwrap();
        let expected: usize = maps.iter()
            .map(|(f, r)| f * f * (r.len() + r.iter().filter(|&&x| x == 1.0).count()))
            .sum();
        prop_assert_eq!(set.len(), expected);
    }

    #[test]
    fn encode_decode_round_trip(
        g in (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.9, 0.01f64..0.9),
        d in (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.9, 0.01f64..0.9),
    ) {
        let gt = BBox::new(g.0, g.1, g.2, g.3);
        let def = BBox::new(d.0, d.1, d.2, d.3);
        let back = decode_offsets(&encode_offsets(&gt, &def).unwrap(), &def).unwrap();
        prop_assert!((back.cx - gt.cx).abs() <= 1e-9 && (back.cy - gt.cy).abs() <= 1e-9);
        prop_assert!((back.w - gt.w).abs() <= 1e-9 && (back.h - gt.h).abs() <= 1e-9);
    }
}

#[test]
fn offset_examples() {
    let def = BBox::new(0.5, 0.5, 0.2, 0.2);
    assert_eq!(encode_offsets(&def, &def).unwrap(), [0.0; 4]);
    let e = encode_offsets(&BBox::new(0.52, 0.5, 0.4, 0.2), &def).unwrap();
    assert!((e[0] - 1.0).abs() < 1e-12);
    assert_eq!(e[1], 0.0);
    assert!((e[2] - 2f64.ln() / 0.2).abs() < 1e-12 && (e[2] - 3.4657).abs() < 1e-4);
    assert_eq!(e[3], 0.0);
    assert!(encode_offsets(&BBox::new(0.5, 0.5, 0.0, 0.1), &def).is_err());
    assert!(decode_offsets(&[0.0; 4], &BBox::new(0.5, 0.5, -0.1, 0.1)).is_err());
}

#[test]
fn iou_matches_area_oracle() {
    let mut rng = oracles::rng(1);
    for _ in 0..2000 {
        let (a, b) = (dyadic_box(&mut rng), dyadic_box(&mut rng));
        assert_eq!(iou(&a, &b), iou_oracle(&a, &b), "{a:?} {b:?}");
    }
}

#[test]
fn matching_examples() {
    let set = build_default_boxes(&standard_grids(), 0.2, 0.9).unwrap();
    let none = match_boxes(&[], &set, 0.5).unwrap();
    assert!(none.assignment.iter().all(|a| a.is_none()));
    let exact = GtBox {
        bbox: set.boxes[700],
        class_id: 3,
    };
    let m = match_boxes(&[exact], &set, 0.9).unwrap();
    assert_eq!(m.best_default, vec![700]);
    assert_eq!(m.assignment[700], Some(0));
    let empty = DefaultBoxSet {
        boxes: vec![],
        layout: vec![],
    };
    assert!(matches!(match_boxes(&[exact], &empty, 0.5), Err(Error::Invalid(_))));
    assert!(match_boxes(&[exact], &set, 1.0).is_err());
}

#[test]
fn matching_equals_exhaustive_oracle() {
    let mut rng = oracles::rng(2);
    for case in 0..300 {
        let nt = rng.gen_range(1..=10);
        let nd = rng.gen_range(nt..=500);
        let truths = random_truths(nt, &mut rng);
        let defaults = DefaultBoxSet {
            boxes: (0..nd).map(|_| dyadic_box(&mut rng)).collect(),
            layout: vec![],
        };
        let tau = [0.3, 0.5, 0.7][case % 3];
        let overlaps: Vec<Vec<f64>> = truths
            .iter()
            .map(|t| defaults.boxes.iter().map(|d| iou_oracle(&t.bbox, d)).collect())
            .collect();
        assert_eq!(match_boxes(&truths, &defaults, tau).unwrap(), match_oracle(&overlaps, nd, tau), "case {case}");
    }
}

#[test]
fn every_truth_keeps_a_forced_match() {
    let mut rng = oracles::rng(3);
    let set = build_default_boxes(&standard_grids(), 0.2, 0.9).unwrap();
    for _ in 0..50 {
        let truths = random_truths(6, &mut rng);
        let m = match_boxes(&truths, &set, 0.5).unwrap();
        for (t, &d) in m.best_default.iter().enumerate() {
            assert_eq!(m.assignment[d], Some(t));
        }
    }
}

#[test]
fn nms_examples() {
    let d = |cx, conf, class_id| Detection {
        bbox: BBox::new(cx, 0.5, 0.2, 0.2),
        class_id,
        confidence: conf,
    };
    assert_eq!(nms(&[d(0.5, 0.7, 1)], NMS_IOU, NMS_TOP_K), vec![d(0.5, 0.7, 1)]);
    assert_eq!(nms(&[d(0.5, 0.8, 1), d(0.5, 0.9, 1)], NMS_IOU, NMS_TOP_K), vec![d(0.5, 0.9, 1)]);
    // other classes never suppress each other
    assert_eq!(nms(&[d(0.5, 0.8, 1), d(0.5, 0.9, 2)], NMS_IOU, NMS_TOP_K).len(), 2);
    let many: Vec<Detection> = (0..10).map(|i| d(0.05 + 0.1 * i as f64, 0.5, 0)).collect();
    assert_eq!(nms(&many, 0.99, 3), many[..3].to_vec());
}

#[test]
fn nms_equals_quadratic_oracle_and_is_idempotent() {
    let mut rng = oracles::rng(4);
    for case in 0..1000 {
        let n = rng.gen_range(0..=50);
        let dets = random_detections(n, &mut rng);
        let top_k = if case % 4 == 0 { 5 } else { NMS_TOP_K };
        let thr = [0.3, NMS_IOU, 0.6][case % 3];
        let out = nms(&dets, thr, top_k);
        assert_eq!(out, nms_oracle(&dets, thr, top_k, iou_oracle), "case {case}");
        assert_eq!(nms(&out, thr, top_k), out);
    }
}

#[test]
fn multibox_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let worst = check_multibox_gradients(seed).unwrap();
        assert!(worst <= 1e-4);
    }
}

#[test]
fn multibox_limits_and_linearity() {
    let (_, _, targets) = tiny_instance(7);
    let mut rng = oracles::rng(8);
    let (logits, offsets) = random_predictions(8, &mut rng);
    let (l1, _) = multibox_loss(&logits, &offsets, &targets, 1.0, 3.0).unwrap();
    let (l2, _) = multibox_loss(&logits, &offsets, &targets, 2.0, 3.0).unwrap();
    let n = l1.positives as f64;
    assert!(((l2.total - l1.total) - l1.loc / n).abs() < 1e-12);
    assert!((l2.total - (l1.conf + 2.0 * l1.loc) / n).abs() < 1e-12);
    assert_eq!(l1.negatives, (3 * l1.positives).min(8 - l1.positives));

    // one-hot logits with a wide margin and exact offsets
    let mut perfect = vec![-40.0; 8 * CLASS_LOGITS];
    for (i, &c) in targets.classes.iter().enumerate() {
        perfect[i * CLASS_LOGITS + c] = 40.0;
    }
    let exact: Vec<f64> = targets.offsets.iter().flatten().copied().collect();
    let (l, _) = multibox_loss(&perfect, &exact, &targets, 1.0, 3.0).unwrap();
    assert!(l.total < 1e-30 && l.loc == 0.0);

    let empty = MultiboxTargets {
        classes: vec![BACKGROUND; 8],
        offsets: vec![[0.0; 4]; 8],
    };
    assert!(multibox_loss(&logits, &offsets, &empty, 1.0, 3.0).is_err());
}

#[test]
fn hard_negatives_are_the_highest_loss_backgrounds() {
    let (_, _, targets) = tiny_instance(9);
    let mut rng = oracles::rng(10);
    let (logits, offsets) = random_predictions(8, &mut rng);
    let (l, g) = multibox_loss(&logits, &offsets, &targets, 1.0, 1.0).unwrap();
    let bg_loss = |i: usize| {
        let row = &logits[i * CLASS_LOGITS..(i + 1) * CLASS_LOGITS];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - row[BACKGROUND]
    };
    let mut bgs: Vec<usize> = (0..8).filter(|&i| targets.classes[i] == BACKGROUND).collect();
    bgs.sort_by(|&a, &b| bg_loss(b).total_cmp(&bg_loss(a)));
    for (rank, &i) in bgs.iter().enumerate() {
        let used = g.logits[i * CLASS_LOGITS..(i + 1) * CLASS_LOGITS].iter().any(|&v| v != 0.0);
        assert_eq!(used, rank < l.negatives, "background {i} at rank {rank}");
    }
}

fn training_scenes(n: usize, seed: u64) -> Vec<Scene> {
    let records = surrogate_records(200, seed);
    let spec = BenchmarkSpec {
        scenes: n,
        base_seed: seed,
        ..BenchmarkSpec::default()
    };
    compose_benchmark(&records, &spec).unwrap()
}

#[test]
fn single_scene_epoch_is_one_iteration() {
    let scenes = training_scenes(1, 1);
    let cfg = DetectorConfig {
        epochs: 1,
        ..DetectorConfig::default()
    };
    let out = train_detector(&scenes, &cfg).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.net.iterations(), 1);
    assert!(out.log[0].loss.is_finite());
}

#[test]
fn smoke_training_reduces_loss() {
    let scenes = training_scenes(20, 2);
    let cfg = DetectorConfig {
        batch_size: 2,
        epochs: 20,
        ..DetectorConfig::default()
    };
    let out = train_detector(&scenes, &cfg).unwrap();
    assert_eq!(out.log.len(), 200);
    let mean = |r: &[DetectorLogRow]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let (lead, trail) = (mean(&out.log[..50]), mean(&out.log[150..]));
    assert!(trail < lead, "leading {lead}, trailing {trail}");
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let scenes = training_scenes(4, 3);
    let cfg = DetectorConfig {
        batch_size: 3,
        epochs: 2,
        seed: 5,
        ..DetectorConfig::default()
    };
    let a = train_detector(&scenes, &cfg).unwrap();
    let b = train_detector(&scenes, &cfg).unwrap();
    let bytes = |o: &DetectorTrainOutput| o.net.to_archive(Some(&o.optimizer)).to_bytes().unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(a.log.len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("det.fsa");
    a.net.save(&path).unwrap();
    let loaded = DetectorNet::load(&path).unwrap();
    assert_eq!(loaded.iterations(), 2 * 2);
    let canvas = &scenes[0].canvas;
    assert_eq!(detect(&loaded, canvas, 0.01).unwrap(), detect(&a.net, canvas, 0.01).unwrap());
    assert_eq!(loaded.predict(canvas).unwrap(), a.net.predict(canvas).unwrap());
}

#[test]
fn detect_contracts() {
    let net = DetectorNet::new(DetectorConfig::default()).unwrap();
    let scenes = training_scenes(2, 4);
    let canvas = &scenes[0].canvas;
    assert!(detect(&net, canvas, 1.0).unwrap().is_empty());
    let loose = detect(&net, canvas, 0.0).unwrap();
    assert!(loose.len() <= NMS_TOP_K);
    for d in &loose {
        assert!(d.bbox.is_inside_unit(1e-12) && d.bbox.w > 0.0 && d.bbox.h > 0.0);
        assert!((d.class_id as usize) < NUM_CLASSES);
        assert!(d.confidence > 0.0 && d.confidence < 1.0);
    }
    for w in loose.windows(2) {
        assert!(w[0].confidence >= w[1].confidence);
    }
    assert_eq!(detect(&net, canvas, 0.0).unwrap(), loose);
    let both = detect_batch(&net, &[canvas, &scenes[1].canvas], 0.0).unwrap();
    assert_eq!(both[0], loose);
    assert!(matches!(detect(&net, &ImageChip::filled(3, 64, 64, 0.0), 0.5), Err(Error::Invalid(_))));
}

#[test]
fn training_preconditions() {
    let mut scenes = training_scenes(2, 5);
    assert!(matches!(train_detector(&[], &DetectorConfig::default()), Err(Error::Data(_))));
    scenes[1].truths.clear();
    scenes[1].provenance.clear();
    assert!(matches!(train_detector(&scenes, &DetectorConfig::default()), Err(Error::Data(_))));
    let bad = DetectorConfig {
        tau: 1.5,
        ..DetectorConfig::default()
    };
    assert!(DetectorNet::new(bad).is_err());
}

#[test]
fn detections_dump_as_json_lines() {
    let dets = vec![Detection {
        bbox: BBox::new(0.5, 0.25, 0.125, 0.0625),
        class_id: 7,
        confidence: 0.75,
    }];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_detections_jsonl(&path, &[(3, dets.clone()), (4, vec![]), (9, dets)]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        serde_json::json!({"scene_id": 3, "class_id": 7, "cx": 0.5, "cy": 0.25, "w": 0.125, "h": 0.0625, "confidence": 0.75})
    );
    assert_eq!(lines[1]["scene_id"], 9);
}
