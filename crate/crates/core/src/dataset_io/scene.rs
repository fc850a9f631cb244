use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{degrade, record_to_chip, resize_bilinear, seeded_rng, sub_seed, CifarRecord, DegradationSpec, ImageChip};
use crate::error::{ensure, Result};
use crate::geometry::{iou, BBox};

/// Largest IoU allowed between two ground truths of one scene.
pub const MAX_TRUTH_IOU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(flatten)]
    pub bbox: BBox,
    pub class_id: u8,
}

/// Where a pasted object came from and how it was transformed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_index: Option<usize>,
    pub placement: BBox,
    pub degradation: DegradationSpec,
    /// `[x0, y0, x1, y1]` in canvas pixels, end-exclusive.
    pub pixel_box: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub canvas: ImageChip,
    pub truths: Vec<GtBox>,
    pub provenance: Vec<Provenance>,
}

impl Scene {
    pub fn canvas_size(&self) -> usize {
        self.canvas.width()
    }

    /// The shared degradation scale of all objects, if there is one.
    pub fn degradation_level(&self) -> Option<f64> {
        let first = self.provenance.first()?.degradation.scale_factor;
        self.provenance
            .iter()
            .all(|p| p.degradation.scale_factor == first)
            .then_some(first)
    }
}

/// One object to paste: a chip, its class, and optionally its dataset index.
#[derive(Clone, Debug)]
pub struct SceneObject {
    pub chip: ImageChip,
    pub class_id: u8,
    pub source_index: Option<usize>,
}

/// Pixel rectangle `[x0, y0, x1, y1)` covered by a normalized box.
pub fn pixel_box(b: &BBox, size: usize) -> [usize; 4] {
    let s = size as f64;
    let [x0, y0, x1, y1] = b.corners();
    let px = |v: f64| ((v * s).round().max(0.0) as usize).min(size);
    let (mut a0, mut b0, mut a1, mut b1) = (px(x0), px(y0), px(x1), px(y1));
    if a1 <= a0 {
        a1 = (a0 + 1).min(size);
        a0 = a1 - 1;
    }
    if b1 <= b0 {
        b1 = (b0 + 1).min(size);
        b0 = b1 - 1;
    }
    [a0, b0, a1, b1]
}

fn background(size: usize, rng: &mut impl Rng) -> ImageChip {
    const GRID: usize = 4;
    let data = (0..3 * GRID * GRID).map(|_| rng.gen_range(-0.2f32..=0.2)).collect();
    let coarse = ImageChip::new(3, GRID, GRID, data).expect("background grid in range");
    resize_bilinear(&coarse, size, size)
}

/// Composes a canvas: seeded smooth background, then every chip degraded per
/// its spec, resized to its placement box, and pasted in order.
pub fn compose_scene(
    objects: &[SceneObject],
    canvas_size: usize,
    placements: &[(BBox, DegradationSpec)],
    seed: u64,
) -> Result<Scene> {
    ensure!(canvas_size >= 1, Invalid, "canvas size must be positive");
    ensure!(
        objects.len() == placements.len(),
        Invalid,
        "{} objects but {} placements",
        objects.len(),
        placements.len()
    );
    for (i, (b, spec)) in placements.iter().enumerate() {
        ensure!(
            b.is_finite() && b.w > 0.0 && b.h > 0.0 && b.w <= 1.0 && b.h <= 1.0,
            Invalid,
            "placement {i} has invalid size"
        );
        ensure!(b.is_inside_unit(1e-9), Invalid, "placement {i} lies outside the canvas");
        spec.validate()?;
        ensure!(objects[i].class_id <= 9, Invalid, "placement {i}: class {} out of range", objects[i].class_id);
    }
    for i in 0..placements.len() {
        for j in i + 1..placements.len() {
            let o = iou(&placements[i].0, &placements[j].0);
            ensure!(
                o <= MAX_TRUTH_IOU,
                Invalid,
                "placements {i} and {j} overlap with IoU {o:.3} > {MAX_TRUTH_IOU}"
            );
        }
    }
    let mut rng = seeded_rng(seed);
    let mut canvas = background(canvas_size, &mut rng);
    let mut truths = Vec::with_capacity(objects.len());
    let mut provenance = Vec::with_capacity(objects.len());
    for (i, (obj, (b, spec))) in objects.iter().zip(placements).enumerate() {
        let degraded = degrade(&obj.chip, spec, sub_seed(seed, i as u64))?;
        let pb = pixel_box(b, canvas_size);
        let resized = resize_bilinear(&degraded, pb[3] - pb[1], pb[2] - pb[0]);
        canvas.paste(&resized, pb[1], pb[0]);
        truths.push(GtBox {
            bbox: *b,
            class_id: obj.class_id,
        });
        provenance.push(Provenance {
            source_index: obj.source_index,
            placement: *b,
            degradation: *spec,
            pixel_box: pb,
        });
    }
    Ok(Scene {
        canvas,
        truths,
        provenance,
    })
}

/// Parameters of a synthetic multi-object benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub scenes: usize,
    pub canvas_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Scene `i` uses `scale_factors[i % len]` for all of its objects.
    pub scale_factors: Vec<f64>,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Object side length range, as a fraction of the canvas.
    pub min_size: f64,
    pub max_size: f64,
    /// Scene `i` is composed with seed `base_seed + i`.
    pub base_seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            scenes: 100,
            canvas_size: 128,
            min_objects: 2,
            max_objects: 4,
            scale_factors: vec![0.25, 0.375, 0.5],
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            min_size: 0.16,
            max_size: 0.22,
            base_seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.canvas_size >= 8, Invalid, "canvas_size too small");
        ensure!(
            1 <= self.min_objects && self.min_objects <= self.max_objects,
            Invalid,
            "object count range {}..={} invalid",
            self.min_objects,
            self.max_objects
        );
        ensure!(!self.scale_factors.is_empty(), Invalid, "scale_factors empty");
        ensure!(
            0.0 < self.min_size && self.min_size <= self.max_size && self.max_size <= 0.5,
            Invalid,
            "object size range invalid"
        );
        for &s in &self.scale_factors {
            DegradationSpec::new(s, self.blur_sigma, self.noise_sigma).validate()?;
        }
        Ok(())
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        self.base_seed.wrapping_add(index as u64)
    }
}

fn plan_scene(records: &[CifarRecord], spec: &BenchmarkSpec, index: usize) -> Result<Scene> {
    let seed = spec.scene_seed(index);
    let mut rng = seeded_rng(seed);
    let level = spec.scale_factors[index % spec.scale_factors.len()];
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut placements: Vec<(BBox, DegradationSpec)> = Vec::with_capacity(n);
    let mut objects = Vec::with_capacity(n);
    let mut attempts = 0;
    while placements.len() < n {
        attempts += 1;
        ensure!(attempts < 10_000, Invalid, "could not place {n} disjoint objects in scene {index}");
        let side = rng.gen_range(spec.min_size..=spec.max_size);
        let cx = rng.gen_range(side / 2.0..=1.0 - side / 2.0);
        let cy = rng.gen_range(side / 2.0..=1.0 - side / 2.0);
        let b = BBox::new(cx, cy, side, side);
        if placements.iter().any(|(p, _)| iou(p, &b) > 0.0) {
            continue;
        }
        let src = rng.gen_range(0..records.len());
        placements.push((b, DegradationSpec::new(level, spec.blur_sigma, spec.noise_sigma)));
        objects.push(SceneObject {
            chip: record_to_chip(&records[src]),
            class_id: records[src].label(),
            source_index: Some(src),
        });
    }
    compose_scene(&objects, spec.canvas_size, &placements, seed)
}

/// Builds `spec.scenes` scenes from `records`. Scenes are independent, so
/// they are composed in parallel; the result does not depend on the pool size.
pub fn compose_benchmark(records: &[CifarRecord], spec: &BenchmarkSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    ensure!(!records.is_empty(), Invalid, "no records to compose scenes from");
    (0..spec.scenes)
        .into_par_iter()
        .map(|i| plan_scene(records, spec, i))
        .collect()
}
