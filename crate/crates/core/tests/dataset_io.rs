use farsight_core::dataset_io::{
    compose_benchmark, compose_scene, degrade, parse_cifar10, read_scene_archive, resize_area, serialize_cifar10,
    synthetic::surrogate_records, write_scene_archive, BenchmarkSpec, CifarRecord, DegradationSpec, ImageChip,
    SceneObject,
};
use farsight_core::{iou, BBox};
use proptest::prelude::*;

fn chip_strategy(h: usize, w: usize) -> impl Strategy<Value = ImageChip> {
    prop::collection::vec(-1.0f32..=1.0, 3 * h * w).prop_map(move |d| ImageChip::new(3, h, w, d).unwrap())
}

/// Mean over each `k x k` block, one scalar loop per output pixel.
fn average_pool_oracle(chip: &ImageChip, k: usize) -> Vec<f32> {
    let (c, h, w) = chip.shape();
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..h / k {
            for ox in 0..w / k {
                let mut s = 0.0f64;
                for y in oy * k..(oy + 1) * k {
                    for x in ox * k..(ox + 1) * k {
                        s += chip.get(ch, y, x) as f64;
                    }
                }
                out.push((s / (k * k) as f64) as f32);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cifar_bytes_round_trip(records in prop::collection::vec((0u8..10, prop::collection::vec(any::<u8>(), 3072)), 1..6)) {
        let mut bytes = Vec::new();
        for (label, px) in &records {
            bytes.push(*label);
            bytes.extend_from_slice(px);
        }
        let parsed = parse_cifar10(&bytes).unwrap();
        prop_assert_eq!(parsed.len(), records.len());
        prop_assert_eq!(serialize_cifar10(&parsed), bytes);
    }

    #[test]
    fn degrade_keeps_shape_and_range(chip in chip_strategy(32, 32), s in 0.05f64..=1.0, blur in 0.0f64..2.0, noise in 0.0f64..0.5, seed in any::<u64>()) {
        let spec = DegradationSpec::new(s, blur, noise);
        let out = degrade(&chip, &spec, seed).unwrap();
        prop_assert_eq!(out.shape(), chip.shape());
        prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(out, degrade(&chip, &spec, seed).unwrap());
    }

    #[test]
    fn area_downsample_is_block_mean(chip in chip_strategy(16, 16), k in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let down = resize_area(&chip, 16 / k, 16 / k);
        for (a, b) in down.data().iter().zip(average_pool_oracle(&chip, k)) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn block_constant_chip_survives_half_scale(blocks in prop::collection::vec(-1.0f32..=1.0, 3 * 16 * 16)) {
        let mut data = vec![0.0; 3 * 32 * 32];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    data[(c * 32 + y) * 32 + x] = blocks[(c * 16 + y / 2) * 16 + x / 2];
                }
            }
        }
        let chip = ImageChip::new(3, 32, 32, data).unwrap();
        let down = resize_area(&chip, 16, 16);
        prop_assert_eq!(down.data(), &blocks[..]);
    }
}

#[test]
fn parse_rejects_truncated_files_and_bad_labels() {
    assert!(parse_cifar10(&[0u8; 3072]).is_err());
    let mut bad = vec![0u8; 3073];
    bad[0] = 10;
    assert!(parse_cifar10(&bad).is_err());
    assert!(CifarRecord::new(3, vec![0; 3071]).is_err());
}

#[test]
fn identity_degradation_is_exact() {
    let chip = ImageChip::new(3, 32, 32, (0..3072).map(|i| ((i % 97) as f32 / 48.0) - 1.0).collect()).unwrap();
    assert_eq!(degrade(&chip, &DegradationSpec::IDENTITY, 5).unwrap(), chip);
}

#[test]
fn quarter_scale_changes_a_textured_chip() {
    let chip = ImageChip::new(3, 32, 32, (0..3072).map(|i| if i % 2 == 0 { 0.9 } else { -0.9 }).collect()).unwrap();
    let out = degrade(&chip, &DegradationSpec::new(0.25, 0.0, 0.0), 0).unwrap();
    assert_ne!(out, chip);
    assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn single_chip_lands_on_expected_pixels() {
    let objects = [SceneObject {
        chip: ImageChip::filled(3, 32, 32, 1.0),
        class_id: 2,
        source_index: None,
    }];
    let placement = [(BBox::new(0.5, 0.5, 0.25, 0.25), DegradationSpec::IDENTITY)];
    let scene = compose_scene(&objects, 128, &placement, 3).unwrap();
    assert_eq!(scene.provenance[0].pixel_box, [48, 48, 80, 80]);
    for c in 0..3 {
        for y in 0..128 {
            for x in 0..128 {
                let inside = (48..80).contains(&y) && (48..80).contains(&x);
                assert_eq!(scene.canvas.get(c, y, x) == 1.0, inside, "pixel ({c}, {y}, {x})");
            }
        }
    }
}

#[test]
fn empty_scene_is_background_only() {
    let scene = compose_scene(&[], 128, &[], 9).unwrap();
    assert!(scene.truths.is_empty());
    assert!(scene.canvas.data().iter().all(|v| v.abs() <= 0.2));
}

#[test]
fn overlapping_or_outside_placements_are_rejected() {
    let obj = SceneObject {
        chip: ImageChip::filled(3, 32, 32, 0.0),
        class_id: 1,
        source_index: None,
    };
    let objects = [obj.clone(), obj.clone()];
    let id = DegradationSpec::IDENTITY;
    // IoU exactly 0.5
    let a = BBox::from_corners(0.0, 0.0, 0.3, 0.3);
    let b = BBox::from_corners(0.1, 0.0, 0.4, 0.3);
    assert_eq!(iou(&a, &b), 0.5);
    assert!(compose_scene(&objects, 64, &[(a, id), (b, id)], 0).is_err());
    let outside = BBox::new(0.95, 0.5, 0.2, 0.2);
    assert!(compose_scene(&[obj], 64, &[(outside, id)], 0).is_err());
}

#[test]
fn benchmark_scenes_follow_their_spec() {
    let spec = BenchmarkSpec {
        scenes: 12,
        base_seed: 500,
        ..BenchmarkSpec::default()
    };
    let records = surrogate_records(80, 1);
    let scenes = compose_benchmark(&records, &spec).unwrap();
    assert_eq!(scenes, compose_benchmark(&records, &spec).unwrap());
    for s in &scenes {
        assert_eq!(s.canvas_size(), 128);
        assert!((2..=4).contains(&s.truths.len()));
        let level = s.degradation_level().unwrap();
        assert!(spec.scale_factors.contains(&level));
        for (i, a) in s.truths.iter().enumerate() {
            assert!(a.bbox.is_inside_unit(1e-9));
            for b in &s.truths[i + 1..] {
                assert!(iou(&a.bbox, &b.bbox) <= 0.3);
            }
        }
    }
    // scene i depends on base_seed + i and, through the level cycle, on i mod 3
    let shifted = compose_benchmark(
        &records,
        &BenchmarkSpec {
            scenes: 3,
            base_seed: 509,
            ..spec.clone()
        },
    )
    .unwrap();
    assert_eq!(shifted[..], scenes[9..]);
}

#[test]
fn scene_archive_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = BenchmarkSpec {
        scenes: 3,
        ..BenchmarkSpec::default()
    };
    let scenes = compose_benchmark(&surrogate_records(30, 2), &spec).unwrap();
    write_scene_archive(dir.path(), &scenes).unwrap();
    let back = read_scene_archive(dir.path()).unwrap();
    assert_eq!(back.len(), scenes.len());
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.truths, b.truths);
        assert_eq!(a.provenance, b.provenance);
        let worst = a.canvas.data().iter().zip(b.canvas.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        // 8-bit storage
        assert!(worst <= 1.0 / 255.0 + 1e-6, "worst {worst}");
    }
}
