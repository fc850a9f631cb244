//! Two-pass pipeline: the detector's confident boxes pass through, small
//! low-confidence boxes are cropped, enhanced by latent projection, and
//! rescored by the discriminator-feature classifier.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset_io::{chip_to_rgb8, resize_bilinear, ImageChip};
use crate::enhancer::{enhance_chip_detailed, ProjectionConfig};
use crate::error::{ensure, Error, Result};
use crate::features::{classify_chip, LinearClassifier};
use crate::gan::{Discriminator, Generator};
use crate::ssd::{detect, nms, Detection, DetectorNet, NMS_IOU, NMS_TOP_K};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    /// Detections at or above pass through untouched.
    pub t_high: f64,
    /// Lower edge of the rescue band.
    pub t_low: f64,
    /// Largest normalized area a rescued box may have.
    pub small_max_area: f64,
    /// Classifier confidence needed to promote a candidate; 1.0 disables
    /// promotion.
    pub t_rescore: f64,
    pub projection: ProjectionConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            t_high: 0.5,
            t_low: 0.15,
            small_max_area: 0.05,
            t_rescore: 0.6,
            projection: ProjectionConfig::default(),
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            0.0 < self.t_low && self.t_low < self.t_high && self.t_high <= 1.0,
            Invalid,
            "cascade thresholds need 0 < t_low < t_high <= 1, got {} and {}",
            self.t_low,
            self.t_high
        );
        ensure!(
            self.small_max_area > 0.0 && self.small_max_area <= 1.0,
            Invalid,
            "small_max_area must lie in (0, 1]"
        );
        // 1.0 disables promotion, which the comparison uses as a control arm
        ensure!(
            self.t_rescore > 0.0 && self.t_rescore <= 1.0,
            Invalid,
            "t_rescore must lie in (0, 1]"
        );
        if self.projection.steps > 0 {
            self.projection.validate()?;
        }
        Ok(())
    }
}

/// One rescued box and what happened to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescueCandidate {
    pub detection: Detection,
    /// Canvas pixels `[x0, y0, x1, y1)` that were cropped.
    pub pixel_box: [usize; 4],
    #[serde(skip)]
    pub chip: Option<ImageChip>,
    #[serde(skip)]
    pub enhanced: Option<ImageChip>,
    pub projection_seed: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub class_id: u8,
    pub confidence: f64,
    pub promoted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrace {
    pub pass1: Vec<Detection>,
    pub pass_through: Vec<Detection>,
    pub candidates: Vec<RescueCandidate>,
    #[serde(rename = "final")]
    pub final_detections: Vec<Detection>,
}

impl CascadeTrace {
    pub fn promoted(&self) -> impl Iterator<Item = &RescueCandidate> {
        self.candidates.iter().filter(|c| c.promoted)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Writes each candidate as a 64x32 PNG: the bilinear 32x32 crop on the
/// left, the enhanced chip on the right.
pub fn write_candidate_images(trace: &CascadeTrace, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (i, c) in trace.candidates.iter().enumerate() {
        let (Some(chip), Some(enhanced)) = (&c.chip, &c.enhanced) else {
            continue;
        };
        let left = chip_to_rgb8(&resize_bilinear(chip, 32, 32));
        let right = chip_to_rgb8(&resize_bilinear(enhanced, 32, 32));
        let mut rgb = Vec::with_capacity(64 * 32 * 3);
        for y in 0..32 {
            rgb.extend_from_slice(&left[y * 96..(y + 1) * 96]);
            rgb.extend_from_slice(&right[y * 96..(y + 1) * 96]);
        }
        let path = dir.join(format!("{stem}_cand{i:03}.png"));
        image::save_buffer_with_format(&path, &rgb, 64, 32, image::ColorType::Rgb8, image::ImageFormat::Png).map_err(
            |e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            },
        )?;
        paths.push(path);
    }
    Ok(paths)
}

/// Pixel rectangle covering a normalized box: corners scaled, floored and
/// ceiled, at least one pixel wide.
pub fn crop_rect(det: &Detection, width: usize, height: usize) -> [usize; 4] {
    let [x0, y0, x1, y1] = det.bbox.clipped().corners();
    let lo = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
    let hi = |v: f64, lo: usize, n: usize| ((v * n as f64).ceil() as usize).clamp(lo + 1, n);
    let (px0, py0) = (lo(x0, width), lo(y0, height));
    [px0, py0, hi(x1, px0, width), hi(y1, py0, height)]
}

/// The detector alone; both comparison arms start from this call.
pub fn run_baseline(net: &DetectorNet, canvas: &ImageChip, conf_thr: f64) -> Result<Vec<Detection>> {
    detect(net, canvas, conf_thr)
}

pub fn run_cascade(
    g: &Generator,
    d: &Discriminator,
    clf: &LinearClassifier,
    net: &DetectorNet,
    canvas: &ImageChip,
    cfg: &CascadeConfig,
) -> Result<CascadeTrace> {
    cfg.validate()?;
    let pass1 = run_baseline(net, canvas, cfg.t_low)?;
    let mut pass_through = Vec::new();
    let mut candidates = Vec::new();
    for det in &pass1 {
        if det.confidence >= cfg.t_high {
            pass_through.push(*det);
            continue;
        }
        if det.bbox.area() > cfg.small_max_area {
            continue;
        }
        let idx = candidates.len() as u64;
        let pixel_box = crop_rect(det, canvas.width(), canvas.height());
        let [x0, y0, x1, y1] = pixel_box;
        let chip = canvas.crop(y0, x0, y1, x1)?;
        let projection = ProjectionConfig {
            seed: cfg.projection.seed.wrapping_add(idx),
            ..cfg.projection.clone()
        };
        let (enhanced, result) = enhance_chip_detailed(g, Some(d), &chip, &projection)?;
        let (class_id, confidence) = classify_chip(d, clf, &enhanced)?;
        candidates.push(RescueCandidate {
            detection: *det,
            pixel_box,
            chip: Some(chip),
            enhanced: Some(enhanced),
            projection_seed: projection.seed,
            initial_loss: result.as_ref().map(|r| r.initial_loss),
            final_loss: result.as_ref().map(|r| r.final_loss),
            class_id,
            confidence,
            promoted: cfg.t_rescore < 1.0 && confidence >= cfg.t_rescore,
        });
    }
    let mut merged = pass_through.clone();
    merged.extend(candidates.iter().filter(|c| c.promoted).map(|c| Detection {
        bbox: c.detection.bbox,
        class_id: c.class_id,
        confidence: c.confidence,
    }));
    let final_detections = nms(&merged, NMS_IOU, NMS_TOP_K);
    Ok(CascadeTrace {
        pass1,
        pass_through,
        candidates,
        final_detections,
    })
}
